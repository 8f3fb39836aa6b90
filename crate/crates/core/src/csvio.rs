//! CSV output and reload of ensembles, ladders and probe results.
//!
//! Floats are written with `{:.16e}`, which round-trips every `f64` and keeps
//! the bytes independent of locale and thread count.

use std::path::Path;
use std::sync::Arc;

use crate::analysis::{ContinuityReport, ItoStudy, LiminfReport, ProbeRow};
use crate::bsde::{BsdeSolution, Ladder};
use crate::error::{Error, Result};
use crate::liquidation::OptimalityReport;
use crate::paths::TimeGrid;
use crate::sde::Ensemble;

pub fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse(field: &str, what: &str) -> Result<f64> {
    field.trim().parse().map_err(|_| Error::MissingInput(format!("{what}: cannot parse {field:?}")))
}

fn index(field: &str, what: &str) -> Result<usize> {
    field.trim().parse().map_err(|_| Error::MissingInput(format!("{what}: cannot parse {field:?}")))
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?)
}

/// Writes `ensemble.csv` (states and quadratic variation densities) and
/// `increments.csv` (Brownian increments) into `dir`.
pub fn write_ensemble(dir: &Path, ens: &Ensemble<f64>) -> Result<()> {
    let d = ens.dim;
    let mut w = writer(&dir.join("ensemble.csv"))?;
    let mut header = vec!["path_id".to_string(), "step".into(), "time".into()];
    header.extend((0..d).map(|i| format!("x_{i}")));
    for i in 0..d {
        header.extend((0..d).map(|j| format!("a_{i}{j}")));
    }
    w.write_record(&header)?;
    for p in 0..ens.n_paths {
        for j in 0..ens.nodes() {
            let mut rec = vec![p.to_string(), j.to_string(), fmt(ens.grid.time(j))];
            rec.extend(ens.x_at(p, j).iter().map(|v| fmt(*v)));
            rec.extend(ens.a_at(p, j).iter().map(|v| fmt(*v)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    if ens.has_increments() {
        let mut w = writer(&dir.join("increments.csv"))?;
        let mut header = vec!["path_id".to_string(), "step".into()];
        header.extend((0..d).map(|i| format!("dw_{i}")));
        w.write_record(&header)?;
        for p in 0..ens.n_paths {
            for j in 0..ens.grid.steps() {
                let mut rec = vec![p.to_string(), j.to_string()];
                rec.extend(ens.dw_at(p, j).iter().map(|v| fmt(*v)));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

/// Reloads an ensemble written by [`write_ensemble`]. The grid is rebuilt
/// from the time column; increments are loaded when present.
pub fn read_ensemble(dir: &Path, seed: u64) -> Result<Ensemble<f64>> {
    let path = dir.join("ensemble.csv");
    if !path.exists() {
        return Err(Error::MissingInput(format!("{} not found", path.display())));
    }
    let mut r = csv::Reader::from_path(&path)?;
    let headers = r.headers()?.clone();
    let d = headers.iter().filter(|h| h.starts_with("x_")).count();
    if d == 0 || headers.len() != 3 + d + d * d {
        return Err(Error::MissingInput("ensemble.csv has an unexpected header".into()));
    }
    let rows = r.records().collect::<std::result::Result<Vec<_>, _>>()?;
    let nodes = rows.iter().take_while(|rec| &rec[0] == "0").count();
    if nodes < 2 || rows.len() % nodes != 0 {
        return Err(Error::MissingInput("ensemble.csv does not hold whole paths".into()));
    }
    let (mut times, mut x, mut a) = (Vec::new(), Vec::new(), Vec::new());
    for (i, rec) in rows.iter().enumerate() {
        let (p, j) = (index(&rec[0], "path_id")?, index(&rec[1], "step")?);
        if (p, j) != (i / nodes, i % nodes) {
            return Err(Error::MissingInput(format!("ensemble.csv rows out of order at path {p} step {j}")));
        }
        if p == 0 {
            times.push(parse(&rec[2], "time")?);
        }
        for k in 0..d {
            x.push(parse(&rec[3 + k], "state")?);
        }
        for k in 0..d * d {
            a.push(parse(&rec[3 + d + k], "quadratic variation")?);
        }
    }
    let grid = Arc::new(TimeGrid::from_points(times)?);
    let mut dw = Vec::new();
    let inc = dir.join("increments.csv");
    if inc.exists() {
        let mut r = csv::Reader::from_path(&inc)?;
        for rec in r.records() {
            let rec = rec?;
            for k in 0..d {
                dw.push(parse(&rec[2 + k], "increment")?);
            }
        }
    }
    Ensemble::from_parts(grid, d, seed, x, dw, a)
}

/// One row per level: `Y(0)` statistics, increments and monotonicity checks.
pub fn write_ladder(path: &Path, ladder: &Ladder<f64>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "level",
        "y0_mean",
        "y0_stderr",
        "increment",
        "violating_fraction",
        "worst_excess",
        "negative_mass",
        "max_residual_rms",
    ])?;
    for (k, sol) in ladder.solutions.iter().enumerate() {
        let y0 = crate::sde::mean_and_stderr(&sol.column(0));
        let (inc, viol, worst) = if k == 0 {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            let c = &ladder.comparisons[k - 1];
            (ladder.increments[k - 1], c.violating_fraction, c.worst_excess)
        };
        let rms = sol.diagnostics.residual_rms.iter().copied().fold(0.0, f64::max);
        w.write_record([
            fmt(sol.level),
            fmt(y0.mean),
            fmt(y0.stderr),
            fmt(inc),
            fmt(viol),
            fmt(worst),
            fmt(sol.diagnostics.negative_mass),
            fmt(rms),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-node `Y`, its standard error and `Z` for the first `limit` paths.
pub fn write_solution(path: &Path, sol: &BsdeSolution<f64>, limit: usize) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["path_id".to_string(), "step".into(), "time".into(), "y".into(), "y_stderr".into()];
    header.extend((0..sol.dim).map(|i| format!("z_{i}")));
    w.write_record(&header)?;
    let steps = sol.grid.steps();
    for p in 0..sol.n_paths.min(limit) {
        for j in 0..sol.nodes() {
            let mut rec =
                vec![p.to_string(), j.to_string(), fmt(sol.grid.time(j)), fmt(sol.y_at(p, j)), fmt(sol.y_se_at(p, j))];
            if j < steps {
                rec.extend(sol.z_at(p, j).iter().map(|v| fmt(*v)));
            } else {
                rec.extend((0..sol.dim).map(|_| String::new()));
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_probes(path: &Path, rows: &[ProbeRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["probe", "parameter", "value", "stderr", "verdict"])?;
    for r in rows {
        w.write_record([r.probe.clone(), r.parameter.clone(), fmt(r.value), fmt(r.stderr), r.verdict.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_continuity(path: &Path, rep: &ContinuityReport<f64>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["time", "weighted_mean", "stderr", "distance", "combined_stderr", "sample_target", "target"])?;
    for (k, t) in rep.times.iter().enumerate() {
        let m = &rep.weighted_means[k];
        w.write_record([
            fmt(*t),
            fmt(m.mean),
            fmt(m.stderr),
            fmt(rep.distances[k]),
            fmt(rep.combined_se[k]),
            fmt(rep.sample_target.mean),
            fmt(rep.target),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_liminf(path: &Path, rep: &LiminfReport<f64>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["eps", "threshold", "finite_error", "finite_pass_rate", "singular_pass_rate"])?;
    for r in &rep.rows {
        w.write_record([
            fmt(r.eps),
            fmt(r.threshold),
            fmt(r.finite_error),
            fmt(r.finite_pass_rate),
            fmt(r.singular_pass_rate),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ito(path: &Path, studies: &[ItoStudy<f64>]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["functional", "steps", "dt", "mean_abs_residual", "stderr", "max_abs_residual"])?;
    for s in studies {
        for r in &s.rows {
            w.write_record([
                s.functional.clone(),
                r.steps.to_string(),
                fmt(r.dt),
                fmt(r.mean_abs.mean),
                fmt(r.mean_abs.stderr),
                fmt(r.max_abs),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_liquidation(path: &Path, rep: &OptimalityReport<f64>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["policy", "cost", "stderr", "value_function", "gap", "violating_fraction"])?;
    let c = &rep.candidate;
    w.write_record([
        c.label.clone(),
        fmt(c.cost.mean),
        fmt(c.cost.stderr),
        fmt(rep.value_function),
        fmt(rep.relative_gap),
        fmt(c.violating_fraction),
    ])?;
    for p in &rep.perturbations {
        let gap = (p.cost.mean - rep.value_function) / rep.value_function;
        w.write_record([
            p.label.clone(),
            fmt(p.cost.mean),
            fmt(p.cost.stderr),
            fmt(rep.value_function),
            fmt(gap),
            String::new(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
