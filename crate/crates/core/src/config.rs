//! JSON experiment configuration and the builders it resolves to.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::TestFunction;
use crate::bsde::{Interval, Piece, PieceRule, PiecewisePhi, TerminalSpec};
use crate::drivers::{DriverSpec, TimeFn};
use crate::error::{Error, Result};
use crate::functional::FunctionalSpec;
use crate::liquidation::ControlProblem;
use crate::paths::TimeGrid;
use crate::regression::{Feature, RegressionBasis};
use crate::sde::SdeModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    SimulateForward,
    SolveLadder,
    Probes,
    Liquidate,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::SimulateForward, Stage::SolveLadder, Stage::Probes, Stage::Liquidate];

    pub fn name(self) -> &'static str {
        match self {
            Self::SimulateForward => "simulate-forward",
            Self::SolveLadder => "solve-ladder",
            Self::Probes => "probes",
            Self::Liquidate => "liquidate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    DriftedBrownian { x0: Vec<f64>, mu: Vec<f64>, sigma: f64 },
    OrnsteinUhlenbeck { x0: Vec<f64>, kappa: f64, theta: f64, sigma: f64 },
    RunningMaxReverting { x0: Vec<f64>, kappa: f64, sigma: f64 },
    Geometric { x0: Vec<f64>, mu: f64, sigma: f64 },
}

impl ModelConfig {
    pub fn build(&self) -> Result<SdeModel<f64>> {
        let nonempty = |x0: &Vec<f64>| {
            if x0.is_empty() {
                Err(Error::Config("model x0 must have at least one coordinate".into()))
            } else {
                Ok(())
            }
        };
        Ok(match self {
            Self::DriftedBrownian { x0, mu, sigma } => {
                nonempty(x0)?;
                if mu.len() != x0.len() {
                    return Err(Error::Config("model mu and x0 differ in length".into()));
                }
                SdeModel::drifted_brownian(x0.clone(), mu.clone(), *sigma)
            }
            Self::OrnsteinUhlenbeck { x0, kappa, theta, sigma } => {
                nonempty(x0)?;
                SdeModel::ornstein_uhlenbeck(x0.clone(), *kappa, *theta, *sigma)
            }
            Self::RunningMaxReverting { x0, kappa, sigma } => {
                nonempty(x0)?;
                SdeModel::running_max_reverting(x0.clone(), *kappa, *sigma)
            }
            Self::Geometric { x0, mu, sigma } => {
                nonempty(x0)?;
                SdeModel::geometric(x0.clone(), *mu, *sigma)
            }
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::DriftedBrownian { x0, .. }
            | Self::OrnsteinUhlenbeck { x0, .. }
            | Self::RunningMaxReverting { x0, .. }
            | Self::Geometric { x0, .. } => x0.len(),
        }
    }

    /// Mean and variance of coordinate `i` at `horizon` when it is Gaussian.
    pub fn gaussian_marginal(&self, horizon: f64, i: usize) -> Option<(f64, f64)> {
        match self {
            Self::DriftedBrownian { x0, mu, sigma } if i < x0.len() => {
                Some((x0[i] + mu[i] * horizon, sigma * sigma * horizon))
            }
            Self::OrnsteinUhlenbeck { x0, kappa, theta, sigma } if *kappa > 0.0 && i < x0.len() => {
                let e = (-kappa * horizon).exp();
                Some((theta + (x0[i] - theta) * e, sigma * sigma * (1.0 - e * e) / (2.0 * kappa)))
            }
            _ => None,
        }
    }
}

/// A time-dependent coefficient: a number or a shaped profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Coefficient {
    Constant(f64),
    Shaped(Shape),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    /// `base + amplitude |sin t|`.
    AbsSine { base: f64, amplitude: f64 },
    /// `intercept + slope t`.
    Linear { intercept: f64, slope: f64 },
}

impl Coefficient {
    pub fn build(&self) -> TimeFn<f64> {
        match self.clone() {
            Self::Constant(c) => Arc::new(move |_t| c),
            Self::Shaped(Shape::AbsSine { base, amplitude }) => {
                Arc::new(move |t: f64| base + amplitude * t.sin().abs())
            }
            Self::Shaped(Shape::Linear { intercept, slope }) => Arc::new(move |t| intercept + slope * t),
        }
    }

    /// Smallest value on `[0, horizon]`, sampled densely.
    pub fn min_on(&self, horizon: f64) -> f64 {
        let f = self.build();
        (0..=1000).map(|i| f(horizon * i as f64 / 1000.0)).fold(f64::INFINITY, f64::min)
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self {
            Self::Constant(c) => Some(*c),
            Self::Shaped(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriverConfig {
    /// `-y|y|^q`.
    Toy {
        q: f64,
    },
    /// `-y|y|^q / (q alpha^q) + gamma`.
    Control {
        q: f64,
        alpha: Coefficient,
        gamma: Coefficient,
        ell: f64,
    },
    Zero,
}

impl DriverConfig {
    pub fn build(&self) -> DriverSpec<f64> {
        match self {
            Self::Toy { q } => DriverSpec::toy(*q),
            Self::Control { q, alpha, gamma, ell } => {
                let mut d = DriverSpec::control(*q, alpha.build(), gamma.build(), *ell);
                d.f0_vanishes = gamma.as_constant() == Some(0.0);
                d
            }
            Self::Zero => DriverSpec::zero(),
        }
    }

    pub fn q(&self) -> Option<f64> {
        match self {
            Self::Toy { q } | Self::Control { q, .. } => Some(*q),
            Self::Zero => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleConfig {
    Infinite,
    Constant(f64),
    Affine { slope: f64, intercept: f64 },
    Power { coef: f64, exponent: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PieceConfig {
    /// Interval in bracket notation, e.g. `"(-inf,0]"`.
    pub interval: String,
    pub rule: RuleConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum FunctionalConfig {
    State {
        index: usize,
    },
    SquareMinusQv,
    ExpMartingale {
        direction: Vec<f64>,
    },
    CosMartingale,
    /// `int_0^t (x_1(s) + time_weight s) Tr A(s) ds`.
    QvIntegral {
        time_weight: f64,
    },
}

impl FunctionalConfig {
    pub fn build(&self, dim: usize) -> Result<FunctionalSpec<f64>> {
        Ok(match self {
            Self::State { index } => {
                if *index >= dim {
                    return Err(Error::Config(format!("state index {index} beyond dimension {dim}")));
                }
                FunctionalSpec::state(dim, *index)
            }
            Self::SquareMinusQv => FunctionalSpec::square_minus_qv(dim),
            Self::ExpMartingale { direction } => {
                if direction.len() != dim {
                    return Err(Error::Config("exp_martingale direction has the wrong length".into()));
                }
                FunctionalSpec::exp_martingale(direction.clone())
            }
            Self::CosMartingale => {
                if dim != 1 {
                    return Err(Error::Config("cos_martingale needs a one-dimensional model".into()));
                }
                FunctionalSpec::cos_martingale()
            }
            Self::QvIntegral { time_weight } => {
                let w = *time_weight;
                FunctionalSpec::qv_integral(dim, Arc::new(move |s, x: &[f64]| x[0] + w * s))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalConfig {
    pub pieces: Vec<PieceConfig>,
    pub functional: FunctionalConfig,
}

impl TerminalConfig {
    pub fn build(&self, dim: usize) -> Result<TerminalSpec<f64>> {
        let pieces = self
            .pieces
            .iter()
            .map(|p| {
                Ok(Piece {
                    interval: Interval::parse(&p.interval)?,
                    rule: match p.rule {
                        RuleConfig::Infinite => PieceRule::Infinite,
                        RuleConfig::Constant(c) => PieceRule::Constant(c),
                        RuleConfig::Affine { slope, intercept } => PieceRule::Affine { slope, intercept },
                        RuleConfig::Power { coef, exponent } => PieceRule::Power { coef, exponent },
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TerminalSpec::new(PiecewisePhi::new(pieces)?, self.functional.build(dim)?))
    }

    pub fn is_singular(&self) -> bool {
        self.pieces.iter().any(|p| p.rule == RuleConfig::Infinite)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinementConfig {
    Uniform,
    Geometric { max_step: f64, ratio: f64, min_step: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    /// Number of steps of the uniform grid.
    pub steps: usize,
    #[serde(default = "uniform")]
    pub refinement: RefinementConfig,
    /// The ladder is certified on `[0, T - eps]`.
    pub eps: f64,
}

fn uniform() -> RefinementConfig {
    RefinementConfig::Uniform
}

impl GridConfig {
    pub fn build(&self) -> Result<TimeGrid<f64>> {
        match &self.refinement {
            RefinementConfig::Uniform => TimeGrid::uniform(self.horizon, self.steps),
            RefinementConfig::Geometric { max_step, ratio, min_step } => {
                TimeGrid::geometric(self.horizon, *max_step, *ratio, *min_step)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisConfig {
    pub features: Vec<Feature>,
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default = "default_partitions")]
    pub partitions: usize,
    #[serde(default = "yes")]
    pub clip: bool,
}

fn default_degree() -> usize {
    3
}
fn default_ridge() -> f64 {
    1e-8
}
fn default_partitions() -> usize {
    8
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_levels")]
    pub levels: Vec<f64>,
    /// Defaults to cubic polynomials in the state and the terminal functional.
    #[serde(default)]
    pub basis: Option<BasisConfig>,
    #[serde(default = "default_tol")]
    pub newton_tol: f64,
    #[serde(default = "default_iterations")]
    pub max_iterations: usize,
}

fn default_levels() -> Vec<f64> {
    (1..=6).map(|k| 10f64.powi(k)).collect()
}
fn default_tol() -> f64 {
    1e-12
}
fn default_iterations() -> usize {
    50
}

impl SolverConfig {
    pub fn basis(&self, dim: usize) -> RegressionBasis<f64> {
        match &self.basis {
            Some(b) => RegressionBasis {
                features: b.features.clone(),
                degree: b.degree,
                ridge: b.ridge,
                partitions: b.partitions.max(1),
                clip: b.clip,
            },
            None => RegressionBasis::standard(dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyConfig {
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlowupConfig {
    pub eps: Vec<f64>,
    /// Stratum margin; defaults to a quarter of the test function support.
    #[serde(default)]
    pub delta: Option<f64>,
    /// Accepted slope band as multiples of `-1/q`.
    #[serde(default = "default_band")]
    pub band: [f64; 2],
}

fn default_band() -> [f64; 2] {
    [0.8, 1.2]
}

/// Reference for the weighted terminal mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceConfig {
    /// Gauss quadrature against the Gaussian law of the first coordinate.
    Gaussian,
    Value(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuityConfig {
    pub support: [f64; 2],
    pub gamma: f64,
    pub times: Vec<f64>,
    #[serde(default)]
    pub reference: Option<ReferenceConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiminfConfig {
    pub eps: Vec<f64>,
    /// Defaults to half the a priori bound at each offset.
    #[serde(default)]
    pub thresholds: Option<Vec<f64>>,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItoConfig {
    pub functionals: Vec<FunctionalConfig>,
    pub base_steps: usize,
    pub refinements: u32,
    pub paths: usize,
    /// Accepted band for the refinement order.
    #[serde(default = "default_order_band")]
    pub order_band: [f64; 2],
}

fn default_order_band() -> [f64; 2] {
    [0.45, 0.55]
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbesConfig {
    #[serde(default)]
    pub apriori: bool,
    #[serde(default)]
    pub z_energy: Option<EnergyConfig>,
    #[serde(default)]
    pub blowup: Option<BlowupConfig>,
    #[serde(default)]
    pub continuity: Option<ContinuityConfig>,
    #[serde(default)]
    pub liminf: Option<LiminfConfig>,
    #[serde(default)]
    pub ito: Option<ItoConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiquidationConfig {
    pub x0: f64,
    #[serde(default = "default_perturbations")]
    pub perturbations: usize,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    /// Accepted relative gap between simulated cost and value function.
    #[serde(default = "default_gap")]
    pub max_gap: f64,
}

fn default_perturbations() -> usize {
    10
}
fn default_amplitude() -> f64 {
    0.2
}
fn default_gap() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub n_paths: usize,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub driver: DriverConfig,
    pub terminal: TerminalConfig,
    pub grid: GridConfig,
    #[serde(default = "default_solver")]
    pub solver: SolverConfig,
    #[serde(default)]
    pub probes: ProbesConfig,
    #[serde(default)]
    pub liquidation: Option<LiquidationConfig>,
    #[serde(default = "all_stages")]
    pub stages: Vec<Stage>,
    /// Number of paths written to the per-path CSVs; all when absent.
    #[serde(default)]
    pub export_paths: Option<usize>,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}
fn default_solver() -> SolverConfig {
    SolverConfig {
        levels: default_levels(),
        basis: None,
        newton_tol: default_tol(),
        max_iterations: default_iterations(),
    }
}
fn all_stages() -> Vec<Stage> {
    Stage::ALL.to_vec()
}

fn on_grid(grid: &TimeGrid<f64>, t: f64, what: &str) -> Result<()> {
    grid.index_of(t).map(|_| ()).map_err(|e| Error::Config(format!("{what}: {e}")))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("cannot parse config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Compact serialization of the parsed config; field order is fixed by the
    /// type, so the text and its hash do not depend on the input layout.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON with the output directory left out, so
    /// the same experiment hashes alike wherever it writes.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        hex::encode(Sha256::digest(c.canonical_json().as_bytes()))
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn test_function(&self) -> Result<Option<TestFunction<f64>>> {
        let (Some(c), Some(q)) = (&self.probes.continuity, self.driver.q()) else {
            return Ok(None);
        };
        TestFunction::new(c.support[0], c.support[1], c.gamma, q).map(Some)
    }

    /// Law of the terminal functional when it is a Gaussian state coordinate.
    pub fn gaussian_terminal(&self) -> Option<(f64, f64)> {
        match self.terminal.functional {
            FunctionalConfig::State { index } => self.model.gaussian_marginal(self.grid.horizon, index),
            _ => None,
        }
    }

    pub fn control_problem(&self) -> Result<ControlProblem<f64>> {
        let (DriverConfig::Control { q, alpha, gamma, ell }, Some(liq)) = (&self.driver, &self.liquidation) else {
            return Err(Error::Config("liquidation needs a control driver and a liquidation block".into()));
        };
        ControlProblem::new(*q, alpha.build(), gamma.build(), liq.x0, self.terminal.build(self.dim())?, *ell)
    }

    /// Checks every reference resolves and every parameter is admissible.
    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })
    }

    fn check(&self) -> Result<()> {
        if self.n_paths == 0 {
            return Err(Error::Config("n_paths must be positive".into()));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("no stages selected".into()));
        }
        let model = self.model.build()?;
        let grid = self.grid.build()?;
        if !(self.grid.eps > 0.0 && self.grid.eps < self.grid.horizon) {
            return Err(Error::Config("grid eps must lie in (0, horizon)".into()));
        }
        let dim = model.dim;
        let term = self.terminal.build(dim)?;
        let driver = self.driver.build();
        if let DriverConfig::Control { alpha, gamma, .. } = &self.driver {
            if !(alpha.min_on(self.grid.horizon) > 0.0) {
                return Err(Error::Config("alpha must stay positive on [0, T]".into()));
            }
            if gamma.min_on(self.grid.horizon) < 0.0 {
                return Err(Error::Config("gamma must be nonnegative on [0, T]".into()));
            }
        }
        if self.terminal.is_singular() {
            driver.validate_for_singular().map_err(|e| Error::Config(e.to_string()))?;
        }
        let levels = &self.solver.levels;
        if levels.is_empty() || levels.windows(2).any(|w| !(w[1] > w[0])) || levels[0] <= 0.0 {
            return Err(Error::Config("truncation levels must be positive and strictly increasing".into()));
        }
        let basis = self.solver.basis(dim);
        for f in &basis.features {
            let i = match f {
                Feature::State(i) | Feature::RunningIntegral(i) | Feature::RunningMax(i) => *i,
                Feature::Functional => 0,
            };
            if i >= dim {
                return Err(Error::Config(format!("basis feature {f:?} beyond dimension {dim}")));
            }
        }
        let horizon = self.grid.horizon;
        let p = &self.probes;
        if let Some(e) = &p.z_energy {
            let q = driver.q.ok_or_else(|| Error::Config("z_energy probe needs a driver with q".into()))?;
            let lower = crate::analysis::rho_threshold(q, driver.ell);
            if !(e.rho > lower && e.rho < 1.0) {
                return Err(Error::Config(format!("z_energy rho {} outside ({lower}, 1)", e.rho)));
            }
        }
        if let Some(b) = &p.blowup {
            if b.eps.len() < 2 {
                return Err(Error::Config("blowup needs at least two offsets".into()));
            }
            for e in &b.eps {
                on_grid(&grid, horizon - e, "blowup offset")?;
            }
        }
        if let Some(c) = &p.continuity {
            let tf =
                self.test_function()?.ok_or_else(|| Error::Config("continuity probe needs a driver with q".into()))?;
            tf.check_support(&term).map_err(|e| Error::Config(format!("support check failed: {e}")))?;
            if c.times.windows(2).any(|w| !(w[1] > w[0])) || c.times.iter().any(|t| !(*t < horizon)) {
                return Err(Error::Config("continuity times must increase strictly and stay before T".into()));
            }
            for t in &c.times {
                on_grid(&grid, *t, "continuity time")?;
            }
            if c.reference == Some(ReferenceConfig::Gaussian) && self.gaussian_terminal().is_none() {
                return Err(Error::Config(
                    "gaussian reference needs a Gaussian model and a state terminal functional".into(),
                ));
            }
        }
        if let Some(l) = &p.liminf {
            for e in &l.eps {
                on_grid(&grid, horizon - e, "liminf offset")?;
            }
            if let Some(th) = &l.thresholds {
                if th.len() != l.eps.len() {
                    return Err(Error::Config("liminf thresholds and offsets differ in length".into()));
                }
            }
        }
        if let Some(ito) = &p.ito {
            if ito.base_steps < 2 || ito.paths == 0 {
                return Err(Error::Config("ito study needs base_steps >= 2 and paths >= 1".into()));
            }
            for f in &ito.functionals {
                f.build(dim)?;
            }
        }
        if self.stages.contains(&Stage::Liquidate) {
            self.control_problem()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MARKOVIAN: &str = r#"{
        "name": "markovian",
        "seed": 7,
        "n_paths": 200,
        "model": {"kind": "drifted_brownian", "x0": [1.0], "mu": [0.0], "sigma": 1.0},
        "driver": {"name": "toy", "q": 3.0},
        "terminal": {
            "pieces": [
                {"interval": "(-inf,0]", "rule": "infinite"},
                {"interval": "(0,inf)", "rule": {"affine": {"slope": 1.0, "intercept": 0.0}}}
            ],
            "functional": {"name": "state", "index": 0}
        },
        "grid": {"horizon": 1.0, "steps": 64, "eps": 0.015625},
        "solver": {"levels": [10, 100]},
        "probes": {
            "apriori": true,
            "continuity": {"support": [0.5, 2.0], "gamma": 3.0, "times": [0.5, 0.75], "reference": "gaussian"}
        },
        "stages": ["simulate-forward", "solve-ladder", "probes"]
    }"#;

    #[test]
    fn parses_and_validates() {
        let c = ExperimentConfig::from_json(MARKOVIAN).unwrap();
        c.validate().unwrap();
        assert_eq!(c.output_dir, PathBuf::from("out"));
        assert_eq!(c.solver.newton_tol, 1e-12);
        let again = ExperimentConfig::from_json(&c.canonical_json()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.hash(), c.hash());
    }

    #[test]
    fn support_overlap_is_a_config_error() {
        let text = MARKOVIAN.replace("[0.5, 2.0]", "[-0.5, 2.0]");
        let err = ExperimentConfig::from_json(&text).unwrap().validate().unwrap_err();
        assert!(err.to_string().contains("support"), "{err}");
    }

    #[test]
    fn rejects_bad_parameters() {
        for (from, to) in [
            ("\"gamma\": 3.0", "\"gamma\": 2.5"),
            ("\"levels\": [10, 100]", "\"levels\": [100, 10]"),
            ("\"times\": [0.5, 0.75]", "\"times\": [0.5, 0.7]"),
            ("\"name\": \"toy\", \"q\": 3.0", "\"name\": \"toy\", \"q\": 1.5"),
            ("\"name\": \"toy\"", "\"name\": \"nonesuch\""),
        ] {
            let text = MARKOVIAN.replace(from, to);
            assert_ne!(text, MARKOVIAN, "{from}");
            let parsed = ExperimentConfig::from_json(&text).and_then(|c| c.validate());
            assert!(matches!(parsed, Err(Error::Config(_))), "{from} -> {to}: {parsed:?}");
        }
    }

    #[test]
    fn control_ell_range_is_checked() {
        let text = MARKOVIAN.replace(
            "{\"name\": \"toy\", \"q\": 3.0}",
            "{\"name\": \"control\", \"q\": 3.0, \"alpha\": 1.0, \"gamma\": 5.0, \"ell\": 1.5}",
        );
        assert!(ExperimentConfig::from_json(&text).unwrap().validate().is_err());
        let ok = text.replace("\"ell\": 1.5", "\"ell\": 1.1");
        ExperimentConfig::from_json(&ok).unwrap().validate().unwrap();
    }

    #[test]
    fn coefficients() {
        let c: Coefficient = serde_json::from_str(r#"{"kind": "abs_sine", "base": 1.0, "amplitude": 0.5}"#).unwrap();
        assert!((c.build()(std::f64::consts::FRAC_PI_2) - 1.5).abs() < 1e-15);
        let k: Coefficient = serde_json::from_str("2.5").unwrap();
        assert_eq!(k.as_constant(), Some(2.5));
    }
}
