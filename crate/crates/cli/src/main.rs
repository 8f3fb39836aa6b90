use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use singular_bsde::config::{FunctionalConfig, ItoConfig, ProbesConfig, Stage};
use singular_bsde::runner::{run, RunError, RunOptions, RunOutcome};
use singular_bsde::ExperimentConfig;

#[derive(Parser)]
#[command(name = "sbsde", version, about = "Singular terminal value BSDE experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the stages listed in the config (or in --stages).
    Run(Common),
    /// Simulate the forward ensemble.
    SimulateForward(Common),
    /// Solve the truncation ladder on a stored ensemble.
    Solve(Common),
    /// Refinement study of the functional change-of-variable residual.
    VerifyIto(Common),
    /// Weighted terminal continuity probe on a stored ensemble.
    ContinuityProbe(Common),
    /// Optimal liquidation check on a stored ensemble.
    Liquidate(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Caps the number of worker threads; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    /// Overrides the output directory of the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma separated stages: simulate-forward, solve-ladder, probes, liquidate.
    #[arg(long, value_delimiter = ',')]
    stages: Option<Vec<String>>,
}

/// Every built-in functional that applies in dimension `dim`.
fn builtin_functionals(dim: usize) -> Vec<FunctionalConfig> {
    let mut fs = vec![
        FunctionalConfig::State { index: 0 },
        FunctionalConfig::SquareMinusQv,
        FunctionalConfig::ExpMartingale { direction: vec![1.0; dim] },
        FunctionalConfig::QvIntegral { time_weight: 1.0 },
    ];
    if dim == 1 {
        fs.push(FunctionalConfig::CosMartingale);
    }
    fs
}

fn prepare(command: Command) -> Result<(ExperimentConfig, RunOptions), RunError> {
    let (common, stage) = match command {
        Command::Run(c) => (c, None),
        Command::SimulateForward(c) => (c, Some(Stage::SimulateForward)),
        Command::Solve(c) => (c, Some(Stage::SolveLadder)),
        Command::VerifyIto(c) => (c, Some(Stage::Probes)),
        Command::ContinuityProbe(c) => (c, Some(Stage::Probes)),
        Command::Liquidate(c) => (c, Some(Stage::Liquidate)),
    };
    let cfg = ExperimentConfig::load(&common.config).map_err(|e| RunError::Config(e.to_string()))?;
    let mut stages = match &common.stages {
        Some(list) => Some(
            list.iter()
                .map(|s| Stage::parse(s))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| RunError::Config(e.to_string()))?,
        ),
        None => None,
    };
    if let Some(stage) = stage {
        stages = Some(vec![stage]);
    }
    Ok((cfg, RunOptions { seed: common.seed, workers: common.workers, out: common.out, stages }))
}

fn report(outcome: &RunOutcome) {
    for r in &outcome.verdicts {
        println!("{:<12} {:<32} {:>24.16e} {:>12.4e} {}", r.probe, r.parameter, r.value, r.stderr, r.verdict);
    }
    for s in &outcome.manifest.stages {
        println!("stage {} {:.3}s", s.stage, s.seconds);
    }
    println!("manifest {}", outcome.out_dir.join("manifest.json").display());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let verify_ito = matches!(cli.command, Command::VerifyIto(_));
    let continuity = matches!(cli.command, Command::ContinuityProbe(_));
    let result = prepare(cli.command).and_then(|(mut cfg, opts)| {
        if verify_ito {
            let ito = cfg.probes.ito.clone().unwrap_or_else(|| ItoConfig {
                functionals: builtin_functionals(cfg.dim()),
                base_steps: 16,
                refinements: 4,
                paths: 200,
                order_band: [0.45, 0.55],
            });
            cfg.probes = ProbesConfig { ito: Some(ito), ..ProbesConfig::default() };
        }
        if continuity {
            let Some(c) = cfg.probes.continuity.clone() else {
                return Err(RunError::Config("config has no continuity probe".into()));
            };
            cfg.probes = ProbesConfig { continuity: Some(c), ..ProbesConfig::default() };
        }
        run(&cfg, &opts)
    });
    match result {
        Ok(outcome) => {
            report(&outcome);
            for f in &outcome.manifest.failures {
                eprintln!("FAIL {f}");
            }
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
