//! Pipeline orchestration: simulate, solve, probe and liquidate from a config.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    apriori_bound_check, blowup_rate, ito_refinement_study, ladder_pathwise_liminf, weighted_terminal_continuity,
    z_energy_profile, ProbeRow, TestFunction, Verdict,
};
use crate::bsde::{truncation_ladder_with, Ladder, SolverOptions, TerminalSpec};
use crate::config::{ExperimentConfig, ReferenceConfig, Stage};
use crate::csvio;
use crate::drivers::DriverSpec;
use crate::error::Error;
use crate::functional::DerivativeStencil;
use crate::liquidation::optimality_gap;
use crate::quadrature;
use crate::sde::{euler_simulate, Ensemble};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("stage {stage}: missing input: {message}")]
    MissingInput { stage: &'static str, message: String },
    #[error("stage {stage} failed: {message}")]
    Numerical { stage: &'static str, message: String },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::MissingInput { .. } => 2,
            Self::Numerical { .. } => 3,
        }
    }

    fn from_stage(stage: Stage, e: Error) -> Self {
        match e {
            Error::MissingInput(message) => Self::MissingInput { stage: stage.name(), message },
            Error::Config(message) => Self::Config(message),
            other => Self::Numerical { stage: stage.name(), message: other.to_string() },
        }
    }
}

/// Command-line overrides of the config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub stages: Option<Vec<Stage>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    /// SHA-256 of the canonical JSON of the effective config.
    pub config_hash: String,
    pub version: String,
    pub seed: u64,
    pub stages: Vec<StageTiming>,
    pub files: Vec<FileEntry>,
    /// `probe/parameter` of every failing verdict.
    pub failures: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub manifest: RunManifest,
    pub verdicts: Vec<ProbeRow>,
}

impl RunOutcome {
    /// 0 when no verdict failed, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.manifest.failures.is_empty() {
            0
        } else {
            3
        }
    }
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Applies the overrides and validates the result.
pub fn effective_config(config: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentConfig, RunError> {
    let mut cfg = config.clone();
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &opts.out {
        cfg.output_dir = out.clone();
    }
    if let Some(stages) = &opts.stages {
        cfg.stages = stages.clone();
    }
    cfg.validate().map_err(|e| RunError::Config(e.to_string()))?;
    Ok(cfg)
}

/// Runs the configured stages, capping parallelism at `opts.workers`.
pub fn run(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome, RunError> {
    let cfg = effective_config(config, opts)?;
    match opts.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| RunError::Config(format!("cannot build worker pool: {e}")))?
            .install(|| Pipeline::new(cfg).execute()),
        None => Pipeline::new(cfg).execute(),
    }
}

struct Pipeline {
    cfg: ExperimentConfig,
    out: PathBuf,
    driver: DriverSpec<f64>,
    term: TerminalSpec<f64>,
    ensemble: Option<Ensemble<f64>>,
    ladder: Option<Ladder<f64>>,
    written: Vec<String>,
    verdicts: Vec<ProbeRow>,
}

fn row(probe: &str, parameter: impl Into<String>, value: f64, stderr: f64, verdict: Verdict) -> ProbeRow {
    ProbeRow::new(probe, parameter, value, stderr, verdict)
}

impl Pipeline {
    fn new(cfg: ExperimentConfig) -> Self {
        let driver = cfg.driver.build();
        let term = cfg.terminal.build(cfg.dim()).expect("validated config");
        let out = cfg.output_dir.clone();
        Self { cfg, out, driver, term, ensemble: None, ladder: None, written: Vec::new(), verdicts: Vec::new() }
    }

    fn execute(mut self) -> Result<RunOutcome, RunError> {
        fs::create_dir_all(&self.out)
            .map_err(|e| RunError::Config(format!("cannot create {}: {e}", self.out.display())))?;
        let config_path = self.out.join("config.json");
        let pretty = serde_json::to_string_pretty(&self.cfg).expect("config serializes");
        fs::write(&config_path, pretty + "\n").map_err(|e| RunError::Config(e.to_string()))?;
        self.written.push("config.json".into());

        let mut timings = Vec::new();
        for stage in Stage::ALL {
            if !self.cfg.stages.contains(&stage) {
                continue;
            }
            let start = Instant::now();
            match stage {
                Stage::SimulateForward => self.simulate(),
                Stage::SolveLadder => self.solve(),
                Stage::Probes => self.probes(),
                Stage::Liquidate => self.liquidate(),
            }
            .map_err(|e| RunError::from_stage(stage, e))?;
            timings.push(StageTiming { stage: stage.name().into(), seconds: start.elapsed().as_secs_f64() });
        }

        if self.cfg.stages.contains(&Stage::Probes) {
            let path = self.record("probes.csv");
            csvio::write_probes(&path, &self.verdicts).map_err(|e| RunError::from_stage(Stage::Probes, e))?;
        }
        self.written.sort();
        self.written.dedup();
        let files = self
            .written
            .iter()
            .map(|name| {
                let path = self.out.join(name);
                Ok(FileEntry { path: name.clone(), bytes: fs::metadata(&path)?.len(), sha256: sha256_file(&path)? })
            })
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| RunError::Numerical { stage: "manifest", message: e.to_string() })?;
        let failures = self
            .verdicts
            .iter()
            .filter(|r| r.verdict.is_failure())
            .map(|r| format!("{}/{}", r.probe, r.parameter))
            .collect();
        let manifest = RunManifest {
            name: self.cfg.name.clone(),
            config_hash: self.cfg.hash(),
            version: VERSION.into(),
            seed: self.cfg.seed,
            stages: timings,
            files,
            failures,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(self.out.join("manifest.json"), text + "\n")
            .map_err(|e| RunError::Numerical { stage: "manifest", message: e.to_string() })?;
        Ok(RunOutcome { out_dir: self.out, manifest, verdicts: self.verdicts })
    }

    fn record(&mut self, name: &str) -> PathBuf {
        self.written.push(name.into());
        self.out.join(name)
    }

    fn simulate(&mut self) -> crate::Result<()> {
        let model = self.cfg.model.build()?;
        let grid = Arc::new(self.cfg.grid.build()?);
        let ens = euler_simulate(&model, grid, self.cfg.n_paths, self.cfg.seed)?;
        csvio::write_ensemble(&self.out, &ens)?;
        self.written.push("ensemble.csv".into());
        if ens.has_increments() {
            self.written.push("increments.csv".into());
        }
        self.ensemble = Some(ens);
        Ok(())
    }

    fn ensure_ensemble(&mut self) -> crate::Result<()> {
        if self.ensemble.is_none() {
            self.ensemble = Some(csvio::read_ensemble(&self.out, self.cfg.seed)?);
        }
        Ok(())
    }

    fn build_ladder(&mut self) -> crate::Result<()> {
        self.ensure_ensemble()?;
        let ens = self.ensemble.as_ref().expect("ensemble loaded");
        let opts =
            SolverOptions { newton_tol: self.cfg.solver.newton_tol, max_iterations: self.cfg.solver.max_iterations };
        let basis = self.cfg.solver.basis(ens.dim);
        let ladder = truncation_ladder_with(
            ens,
            &self.driver,
            &self.term,
            &self.cfg.solver.levels,
            &basis,
            self.cfg.grid.eps,
            &opts,
        )?;
        self.ladder = Some(ladder);
        Ok(())
    }

    fn solve(&mut self) -> crate::Result<()> {
        self.build_ladder()?;
        let ladder = self.ladder.as_ref().expect("ladder solved");
        csvio::write_ladder(&self.out.join("ladder.csv"), ladder)?;
        let limit = self.cfg.export_paths.unwrap_or(usize::MAX);
        let mut names = vec!["ladder.csv".to_string()];
        for (k, sol) in ladder.solutions.iter().enumerate() {
            let name = format!("solution_{k}.csv");
            csvio::write_solution(&self.out.join(&name), sol, limit)?;
            names.push(name);
        }
        self.written.extend(names);
        Ok(())
    }

    /// The ladder of this run, or a re-solve on the stored ensemble when an
    /// earlier invocation wrote `ladder.csv`.
    fn ensure_ladder(&mut self) -> crate::Result<()> {
        if self.ladder.is_some() {
            return Ok(());
        }
        if !self.out.join("ladder.csv").exists() {
            return Err(Error::MissingInput(format!("{} has no ladder.csv", self.out.display())));
        }
        self.build_ladder()
    }

    fn needs_ladder(&self) -> bool {
        let p = &self.cfg.probes;
        p.apriori || p.z_energy.is_some() || p.blowup.is_some() || p.continuity.is_some() || p.liminf.is_some()
    }

    fn probes(&mut self) -> crate::Result<()> {
        let mut rows = Vec::new();
        if self.needs_ladder() {
            self.ensure_ladder()?;
            self.ladder_probes(&mut rows)?;
        }
        if let Some(ito) = self.cfg.probes.ito.clone() {
            let model = self.cfg.model.build()?;
            let stencil = DerivativeStencil::default();
            let mut studies = Vec::new();
            for fc in &ito.functionals {
                let f = fc.build(model.dim)?;
                let study = ito_refinement_study(
                    &f,
                    &model,
                    self.cfg.grid.horizon,
                    ito.base_steps,
                    ito.refinements,
                    ito.paths,
                    self.cfg.seed,
                    &stencil,
                )?;
                if study.max_abs <= 1e-10 {
                    rows.push(row("ito", format!("{}/max_abs", study.functional), study.max_abs, 0.0, Verdict::Pass));
                } else {
                    let order = study.order.unwrap_or(f64::NAN);
                    let ok = order >= ito.order_band[0] && order <= ito.order_band[1];
                    rows.push(row("ito", format!("{}/order", study.functional), order, 0.0, Verdict::from_bool(ok)));
                }
                studies.push(study);
            }
            csvio::write_ito(&self.record("ito.csv"), &studies)?;
        }
        self.verdicts.extend(rows);
        Ok(())
    }

    fn test_function(&self) -> crate::Result<Option<TestFunction<f64>>> {
        self.cfg.test_function()
    }

    /// `E[Phi(X) phi(X)]` for Gaussian `X`, by Gauss-Legendre quadrature over
    /// the support of `phi`.
    fn gaussian_reference(&self, tf: &TestFunction<f64>) -> Option<f64> {
        let (mean, var) = self.cfg.gaussian_terminal()?;
        let sd = var.sqrt();
        let phi = &self.term.phi;
        let density = |x: f64| (-(x - mean).powi(2) / (2.0 * var)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
        Some(quadrature::integrate(|x| phi.eval(x) * tf.phi(x) * density(x), tf.lo, tf.hi, 20, 64))
    }

    fn ladder_probes(&mut self, rows: &mut Vec<ProbeRow>) -> crate::Result<()> {
        let tf = self.test_function()?;
        let ladder = self.ladder.as_ref().expect("ladder solved");
        let probes = self.cfg.probes.clone();
        let q = self.driver.q;

        for c in &ladder.comparisons {
            let ok = c.violating_fraction <= 0.01;
            rows.push(row(
                "comparison",
                format!("{}->{}", c.lower, c.upper),
                c.violating_fraction,
                0.0,
                Verdict::from_bool(ok),
            ));
        }

        if probes.apriori {
            let rep = apriori_bound_check(&ladder.solutions, &self.driver);
            rows.push(row("apriori", "worst_ratio", rep.worst_ratio, 0.0, rep.verdict));
            rows.push(row("apriori", "strict_fraction", rep.strict_fraction, 0.0, rep.verdict));
            rows.push(row("apriori", "within_se_fraction", rep.within_se_fraction, 0.0, rep.verdict));
        }

        if let Some(e) = &probes.z_energy {
            let prof = z_energy_profile(ladder, &self.driver, e.rho)?;
            for en in &prof.energies {
                rows.push(row("z_energy", format!("n={}", en.level), en.value, en.stderr, prof.verdict));
            }
        }

        let mut blowup_file = None;
        if let Some(b) = &probes.blowup {
            let delta = b.delta.unwrap_or_else(|| tf.as_ref().map_or(0.0, |t| 0.25 * t.width()));
            let rep = blowup_rate(ladder, &self.term, &b.eps, delta)?;
            let verdict = match q {
                Some(q) if rep.singular_mass > 0.0 => {
                    Verdict::from_bool(rep.slope >= -b.band[1] / q && rep.slope <= -b.band[0] / q)
                }
                _ => Verdict::NotApplicable,
            };
            rows.push(row("blowup", "slope", rep.slope, 0.0, verdict));
            rows.push(row("blowup", "stratum_mass", rep.stratum_mass, 0.0, verdict));
            blowup_file = Some(rep);
        }

        let mut continuity_file = None;
        if let (Some(c), Some(tf)) = (&probes.continuity, &tf) {
            let reference = match c.reference {
                Some(ReferenceConfig::Gaussian) => self.gaussian_reference(tf),
                Some(ReferenceConfig::Value(v)) => Some(v),
                None => None,
            };
            let rep = weighted_terminal_continuity(ladder, &self.term, tf, &c.times, reference)?;
            let last = rep.times.len() - 1;
            rows.push(row("continuity", "target", rep.target, rep.sample_target.stderr, rep.verdict));
            rows.push(row("continuity", "last_distance", rep.distances[last], rep.combined_se[last], rep.verdict));
            continuity_file = Some(rep);
        }

        let mut liminf_file = None;
        if let Some(l) = &probes.liminf {
            let horizon = self.cfg.grid.horizon;
            let thresholds: Vec<f64> = match &l.thresholds {
                Some(t) => t.clone(),
                None => l
                    .eps
                    .iter()
                    .map(|e| match (q, self.driver.a_integral(horizon - e, horizon)) {
                        (Some(q), Some(ia)) => 0.5 * (q * ia).powf(-1.0 / q),
                        _ => 0.0,
                    })
                    .collect(),
            };
            let rep = ladder_pathwise_liminf(ladder, &l.eps, &thresholds, l.tol)?;
            for r in &rep.rows {
                rows.push(row("liminf", format!("eps={}/finite", r.eps), r.finite_pass_rate, 0.0, Verdict::Advisory));
                rows.push(row(
                    "liminf",
                    format!("eps={}/singular", r.eps),
                    r.singular_pass_rate,
                    0.0,
                    Verdict::Advisory,
                ));
            }
            liminf_file = Some(rep);
        }

        if let Some(rep) = blowup_file {
            let path = self.record("blowup.csv");
            let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
            w.write_record(["eps", "mean", "stderr"])?;
            for (e, m) in rep.eps.iter().zip(&rep.means) {
                w.write_record([csvio::fmt(*e), csvio::fmt(m.mean), csvio::fmt(m.stderr)])?;
            }
            w.flush()?;
        }
        if let Some(rep) = continuity_file {
            csvio::write_continuity(&self.record("continuity.csv"), &rep)?;
        }
        if let Some(rep) = liminf_file {
            csvio::write_liminf(&self.record("liminf.csv"), &rep)?;
        }
        Ok(())
    }

    fn liquidate(&mut self) -> crate::Result<()> {
        let liq = self.cfg.liquidation.clone().ok_or_else(|| Error::Config("no liquidation block".into()))?;
        let problem = self.cfg.control_problem()?;
        self.ensure_ladder()?;
        let ens = self.ensemble.as_ref().expect("ensemble loaded");
        let bsde = self.ladder.as_ref().expect("ladder solved").limit();
        let rep = optimality_gap(&problem, ens, bsde, liq.perturbations, liq.amplitude, self.cfg.seed)?;
        csvio::write_liquidation(&self.record("liquidation.csv"), &rep)?;
        let beaten = rep.perturbations.iter().filter(|p| p.beaten).count();
        self.verdicts.extend([
            row(
                "liquidation",
                "relative_gap",
                rep.relative_gap,
                rep.candidate.cost.stderr / rep.value_function,
                Verdict::from_bool(rep.relative_gap.abs() <= liq.max_gap),
            ),
            row("liquidation", "perturbations_beaten", beaten as f64, 0.0, Verdict::from_bool(rep.all_beaten)),
            row(
                "liquidation",
                "violating_fraction",
                rep.candidate.violating_fraction,
                0.0,
                Verdict::from_bool(rep.candidate.violating_fraction == 0.0),
            ),
        ]);
        Ok(())
    }
}

/// Re-parses the stored config copy and checks the manifest against the
/// files on disk.
pub fn verify_manifest(dir: &Path) -> crate::Result<RunManifest> {
    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let cfg = ExperimentConfig::load(&dir.join("config.json"))?;
    if cfg.hash() != manifest.config_hash {
        return Err(Error::Config("stored config does not match the manifest hash".into()));
    }
    for f in &manifest.files {
        if sha256_file(&dir.join(&f.path))? != f.sha256 {
            return Err(Error::Config(format!("{} does not match its manifest digest", f.path)));
        }
    }
    Ok(manifest)
}
