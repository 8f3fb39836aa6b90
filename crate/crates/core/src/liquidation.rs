//! Optimal liquidation with a terminal constraint: value function
//! `|x|^p Y`, the feedback built from `Y`, and Monte Carlo cost evaluation.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;

use crate::bsde::{BsdeSolution, TerminalSpec};
use crate::drivers::{DriverSpec, TimeFn};
use crate::error::{Error, Result};
use crate::sde::{mean_and_stderr, Ensemble, MonteCarloEstimate};
use crate::{count, lit, Scalar};

/// Minimize `E[int alpha|eta|^p + gamma|X|^p ds + xi |X(T)|^p]` over
/// `dX = eta ds`, `X(0) = x0`, with `X(T) = 0` where `xi = +inf`.
#[derive(Clone)]
pub struct ControlProblem<S> {
    pub alpha: TimeFn<S>,
    pub gamma: TimeFn<S>,
    pub q: S,
    /// Conjugate of `1 + q`.
    pub p: S,
    pub x0: S,
    pub term: TerminalSpec<S>,
    /// Integrability exponent carried by the associated driver.
    pub ell: S,
}

impl<S: fmt::Debug> fmt::Debug for ControlProblem<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlProblem").field("q", &self.q).field("p", &self.p).field("x0", &self.x0).finish()
    }
}

impl<S: Scalar> ControlProblem<S> {
    pub fn new(q: S, alpha: TimeFn<S>, gamma: TimeFn<S>, x0: S, term: TerminalSpec<S>, ell: S) -> Result<Self> {
        if !(q > S::zero()) {
            return Err(Error::InvalidParameter(format!("exponent q = {q} must be positive")));
        }
        Ok(Self { alpha, gamma, q, p: (S::one() + q) / q, x0, term, ell })
    }

    pub fn constant(q: S, alpha: S, gamma: S, x0: S, term: TerminalSpec<S>, ell: S) -> Result<Self> {
        if !(alpha > S::zero()) || gamma < S::zero() {
            return Err(Error::InvalidParameter(format!("need alpha > 0 and gamma >= 0, got {alpha}, {gamma}")));
        }
        Self::new(q, Arc::new(move |_t| alpha), Arc::new(move |_t| gamma), x0, term, ell)
    }

    /// The generator whose minimal supersolution gives the value function.
    pub fn driver(&self) -> DriverSpec<S> {
        let mut d = DriverSpec::control(self.q, self.alpha.clone(), self.gamma.clone(), self.ell);
        d.name = "liquidation".into();
        d
    }

    /// `1/p + 1/(1+q)`, equal to one up to rounding.
    pub fn holder_sum(&self) -> S {
        self.p.recip() + (S::one() + self.q).recip()
    }

    /// Same problem from another initial position.
    pub fn with_position(&self, x0: S) -> Self {
        Self { x0, ..self.clone() }
    }
}

pub type RateFn<S> = Arc<dyn Fn(S, S, S) -> S + Send + Sync>;

/// Trading rate `eta(s, X(s), Y(s))`.
#[derive(Clone)]
pub struct ControlPolicy<S> {
    pub label: String,
    pub rate: RateFn<S>,
    /// Sell the remaining position at a constant rate over the final
    /// interval on paths where `xi = +inf`.
    pub liquidate_at_end: bool,
}

impl<S> fmt::Debug for ControlPolicy<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlPolicy").field("label", &self.label).finish()
    }
}

impl<S: Scalar> ControlPolicy<S> {
    pub fn new(label: impl Into<String>, rate: RateFn<S>) -> Self {
        Self { label: label.into(), rate, liquidate_at_end: true }
    }

    /// Never trades, not even at the end.
    pub fn idle() -> Self {
        Self { liquidate_at_end: false, ..Self::new("idle", Arc::new(|_s, _x, _y| S::zero())) }
    }

    /// `eta (1 + amplitude sin(2 pi freq s / T + phase))`.
    pub fn perturbed(&self, amplitude: S, freq: S, phase: S, horizon: S) -> Self {
        let base = self.rate.clone();
        let two_pi: S = lit(2.0 * PI);
        Self {
            label: format!("{}*(1+{amplitude}sin(2pi*{freq}s/T+{phase}))", self.label),
            rate: Arc::new(move |s, x, y| {
                base(s, x, y) * (S::one() + amplitude * (two_pi * freq * s / horizon + phase).sin())
            }),
            liquidate_at_end: self.liquidate_at_end,
        }
    }
}

/// `|x|^p Y`.
pub fn value_function<S: Scalar>(y0: S, x: S, p: S) -> Result<S> {
    if y0 < S::zero() || y0.is_nan() {
        return Err(Error::InvalidParameter(format!("value process must be nonnegative, got {y0}")));
    }
    if x == S::zero() {
        return Ok(S::zero());
    }
    Ok(x.abs().powf(p) * y0)
}

/// `eta = -X (Y / alpha)^q`.
pub fn candidate_feedback<S: Scalar>(problem: &ControlProblem<S>, bsde: &BsdeSolution<S>) -> Result<ControlPolicy<S>> {
    if bsde.all_y().iter().any(|y| !y.is_finite() || *y < S::zero()) {
        return Err(Error::InvalidParameter("value process has non-finite or negative entries".into()));
    }
    let alpha = problem.alpha.clone();
    let q = problem.q;
    Ok(ControlPolicy::new(
        "feedback",
        Arc::new(move |s, x, y| if y == S::zero() { S::zero() } else { -x * (y / alpha(s)).powf(q) }),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostEstimate<S> {
    pub label: String,
    /// Infinite when some singular path ends away from zero.
    pub cost: MonteCarloEstimate<S>,
    /// Per-path costs.
    pub per_path: Vec<S>,
    /// `X(T)` per path.
    pub terminal_positions: Vec<S>,
    /// Fraction of singular paths with `X(T) != 0`.
    pub violating_fraction: S,
}

/// `int_0^h |x0 + eta u|^p du`.
fn power_integral<S: Scalar>(x0: S, eta: S, h: S, p: S) -> S {
    let x1 = x0 + eta * h;
    if eta == S::zero() || (x1 - x0).abs() <= lit::<S>(1e-14) * x0.abs() {
        return x0.abs().powf(p) * h;
    }
    let anti = |x: S| x.signum() * x.abs().powf(p + S::one()) / (p + S::one());
    (anti(x1) - anti(x0)) / eta
}

/// Runs `policy` on every path with the rate frozen over each step.
pub fn simulate_cost<S: Scalar>(
    problem: &ControlProblem<S>,
    policy: &ControlPolicy<S>,
    ens: &Ensemble<S>,
    bsde: &BsdeSolution<S>,
) -> Result<CostEstimate<S>> {
    if bsde.n_paths != ens.n_paths || bsde.grid.points() != ens.grid.points() {
        return Err(Error::Shape("policy value process and ensemble live on different grids".into()));
    }
    let xi = problem.term.terminal_values(ens);
    let grid = &ens.grid;
    let n = grid.steps();
    let p = problem.p;
    let results: Vec<(S, S)> = (0..ens.n_paths)
        .into_par_iter()
        .map(|path| {
            let forced = policy.liquidate_at_end && xi[path].is_infinite();
            let mut x = problem.x0;
            let mut cost = S::zero();
            for j in 0..n {
                let (t, h) = (grid.time(j), grid.dt(j));
                let eta = if forced && j + 1 == n { -x / h } else { (policy.rate)(t, x, bsde.y_at(path, j)) };
                cost = cost
                    + (problem.alpha)(t) * eta.abs().powf(p) * h
                    + (problem.gamma)(t) * power_integral(x, eta, h, p);
                x = if forced && j + 1 == n { S::zero() } else { x + eta * h };
            }
            let terminal = if x == S::zero() {
                S::zero()
            } else if xi[path].is_infinite() {
                S::infinity()
            } else {
                xi[path] * x.abs().powf(p)
            };
            (cost + terminal, x)
        })
        .collect();
    let per_path: Vec<S> = results.iter().map(|r| r.0).collect();
    let terminal_positions: Vec<S> = results.iter().map(|r| r.1).collect();
    let n_singular = xi.iter().filter(|v| v.is_infinite()).count();
    let violations = xi.iter().zip(&terminal_positions).filter(|(v, x)| v.is_infinite() && **x != S::zero()).count();
    let violating_fraction = if n_singular == 0 { S::zero() } else { count::<S>(violations) / count(n_singular) };
    let cost = if violations > 0 {
        MonteCarloEstimate { mean: S::infinity(), stderr: S::zero() }
    } else {
        mean_and_stderr(&per_path)
    };
    Ok(CostEstimate { label: policy.label.clone(), cost, per_path, terminal_positions, violating_fraction })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationResult<S> {
    pub label: String,
    pub cost: MonteCarloEstimate<S>,
    /// Paired estimate of `cost - candidate cost`.
    pub excess: MonteCarloEstimate<S>,
    /// `excess > 2 SE`.
    pub beaten: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalityReport<S> {
    pub candidate: CostEstimate<S>,
    pub value_function: S,
    /// `(cost - value) / value`.
    pub relative_gap: S,
    pub perturbations: Vec<PerturbationResult<S>>,
    /// Every perturbed policy costs more than the candidate beyond 2 SE.
    pub all_beaten: bool,
}

/// Frequencies in `1..=4` and phases in `[0, 2 pi)` drawn from `seed`.
pub fn perturbation_schedule<S: Scalar>(count: usize, seed: u64) -> Vec<(S, S)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let freq = 1 + rng.next_u32() % 4;
            let phase = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 * PI;
            (lit(freq as f64), lit(phase))
        })
        .collect()
}

pub fn optimality_gap<S: Scalar>(
    problem: &ControlProblem<S>,
    ens: &Ensemble<S>,
    bsde: &BsdeSolution<S>,
    perturbations: usize,
    amplitude: S,
    seed: u64,
) -> Result<OptimalityReport<S>> {
    let policy = candidate_feedback(problem, bsde)?;
    let candidate = simulate_cost(problem, &policy, ens, bsde)?;
    let y0 = bsde.column(0).into_iter().sum::<S>() / count(bsde.n_paths);
    let value = value_function(y0, problem.x0, problem.p)?;
    let relative_gap =
        if value == S::zero() { candidate.cost.mean.abs() } else { (candidate.cost.mean - value) / value };
    let horizon = ens.grid.horizon();
    let two: S = lit(2.0);
    let results = perturbation_schedule::<S>(perturbations, seed)
        .into_iter()
        .map(|(freq, phase)| {
            let pert = policy.perturbed(amplitude, freq, phase, horizon);
            let est = simulate_cost(problem, &pert, ens, bsde)?;
            let diffs: Vec<S> = est.per_path.iter().zip(&candidate.per_path).map(|(a, b)| *a - *b).collect();
            let excess = mean_and_stderr(&diffs);
            let beaten = excess.mean > two * excess.stderr;
            Ok(PerturbationResult { label: est.label, cost: est.cost, excess, beaten })
        })
        .collect::<Result<Vec<_>>>()?;
    let all_beaten = results.iter().all(|r| r.beaten);
    Ok(OptimalityReport { candidate, value_function: value, relative_gap, perturbations: results, all_beaten })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::solve_truncated;
    use crate::paths::TimeGrid;
    use crate::regression::RegressionBasis;
    use crate::sde::{euler_simulate, SdeModel};

    fn toy_problem(x0: f64) -> ControlProblem<f64> {
        let alpha = (1.0f64 / 3.0).powf(1.0 / 3.0);
        ControlProblem::constant(3.0, alpha, 0.0, x0, TerminalSpec::constant(f64::INFINITY, 1), 1.0).unwrap()
    }

    fn deterministic(steps: usize, problem: &ControlProblem<f64>) -> (Ensemble<f64>, BsdeSolution<f64>) {
        let grid = Arc::new(TimeGrid::uniform(1.0, steps).unwrap());
        let ens = euler_simulate(&SdeModel::drifted_brownian(vec![0.0], vec![0.0], 0.0), grid, 2, 5).unwrap();
        let sol = solve_truncated(&ens, &problem.driver(), &problem.term, 1e6, &RegressionBasis::standard(1)).unwrap();
        (ens, sol)
    }

    #[test]
    fn value_function_examples() {
        assert_eq!(value_function(0.7, 0.0, 4.0 / 3.0).unwrap(), 0.0);
        let v: f64 = value_function(0.693_361, 2.0, 4.0 / 3.0).unwrap();
        assert!((v - 1.747_160).abs() < 1e-6, "{v}");
        let (a, b): (f64, f64) = (value_function(1.4, 2.0, 1.5).unwrap(), value_function(0.7, 2.0, 1.5).unwrap());
        assert!((a - 2.0 * b).abs() < 1e-15);
        assert!(value_function(-1.0, 1.0, 1.5).is_err());
    }

    #[test]
    fn conjugate_exponent() {
        let pb = toy_problem(1.0);
        assert!((pb.p - 4.0 / 3.0).abs() < 1e-15);
        assert!((pb.holder_sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn toy_feedback_liquidates_linearly() {
        let pb = toy_problem(2.0);
        let (ens, sol) = deterministic(100, &pb);
        let policy = candidate_feedback(&pb, &sol).unwrap();
        let mut x = pb.x0;
        for j in 0..99 {
            let t = ens.grid.time(j);
            x += policy.rate.as_ref()(t, x, sol.y_at(0, j)) * ens.grid.dt(j);
            let expected = 2.0 * (1.0 - ens.grid.time(j + 1));
            assert!((x - expected).abs() < 1e-9, "{j}: {x} vs {expected}");
        }
        let est = simulate_cost(&pb, &policy, &ens, &sol).unwrap();
        assert!(est.terminal_positions.iter().all(|x| *x == 0.0));
        let exact = 2f64.powf(4.0 / 3.0) * 3f64.powf(-1.0 / 3.0);
        assert!((est.cost.mean - exact).abs() / exact < 1e-3, "{} vs {exact}", est.cost.mean);
    }

    #[test]
    fn idle_policy_costs_nothing_without_penalties() {
        let pb = ControlProblem::constant(3.0, 1.0, 0.0, 1.0, TerminalSpec::constant(0.0, 1), 1.0).unwrap();
        let (ens, sol) = deterministic(10, &pb);
        let est = simulate_cost(&pb, &ControlPolicy::idle(), &ens, &sol).unwrap();
        assert_eq!(est.cost.mean, 0.0);
    }

    #[test]
    fn constraint_violation_makes_the_cost_infinite() {
        let pb = toy_problem(1.0);
        let (ens, sol) = deterministic(10, &pb);
        let est = simulate_cost(&pb, &ControlPolicy::idle(), &ens, &sol).unwrap();
        assert_eq!(est.violating_fraction, 1.0);
        assert!(est.cost.mean.is_infinite());
        let lazy = ControlPolicy::new("lazy", Arc::new(|_s, _x, _y| 0.0));
        let est = simulate_cost(&pb, &lazy, &ens, &sol).unwrap();
        assert_eq!(est.violating_fraction, 0.0);
        assert!(est.cost.mean.is_finite());
    }

    #[test]
    fn power_integral_matches_quadrature() {
        for (x0, eta) in [(1.0, -0.5), (0.3, -1.0), (-0.4, 0.2), (2.0, 0.0)] {
            let exact = power_integral(x0, eta, 1.0, 4.0 / 3.0);
            let num = crate::quadrature::integrate(|u: f64| (x0 + eta * u).abs().powf(4.0 / 3.0), 0.0, 1.0, 8, 400);
            assert!((exact - num).abs() < 1e-6, "{x0} {eta}: {exact} vs {num}");
        }
    }

    #[test]
    fn gap_is_scale_invariant() {
        let base = toy_problem(1.0);
        let (ens, sol) = deterministic(200, &base);
        let g1 = optimality_gap(&base, &ens, &sol, 0, 0.2, 1).unwrap();
        assert!(g1.relative_gap.abs() < 1e-3);
        assert!(g1.perturbations.is_empty());
        for lambda in [-2.0, 0.5, 3.0] {
            let g = optimality_gap(&base.with_position(lambda), &ens, &sol, 0, 0.2, 1).unwrap();
            assert!((g.relative_gap - g1.relative_gap).abs() < 1e-12);
            let ratio = g.candidate.cost.mean / g1.candidate.cost.mean;
            assert!((ratio - f64::abs(lambda).powf(base.p)).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_is_deterministic() {
        let a = perturbation_schedule::<f64>(10, 3);
        assert_eq!(a, perturbation_schedule::<f64>(10, 3));
        assert!(a.iter().all(|(f, ph)| (1.0..=4.0).contains(f) && (0.0..2.0 * PI).contains(ph)));
    }
}
