//! Probes of the quantitative properties of truncation ladders: the a priori
//! bound, the weighted `Z` energy, the blow-up rate at the horizon and the
//! convergence of `Y` to the terminal value.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::bsde::{BsdeSolution, Ladder, TerminalSpec};
use crate::drivers::DriverSpec;
use crate::error::{Error, Result};
use crate::functional::{ito_residual, refinement_order, DerivativeStencil, FunctionalSpec};
use crate::noise::aggregate_increments;
use crate::paths::TimeGrid;
use crate::sde::{euler_simulate, euler_simulate_from_increments, mean_and_stderr, MonteCarloEstimate, SdeModel};
use crate::{count, lit, to_f64, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Advisory,
    NotApplicable,
}

impl Verdict {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Self::Pass
        } else {
            Self::Fail
        }
    }

    pub fn is_failure(self) -> bool {
        self == Self::Fail
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pass => "PASS",
            Self::Fail => "FAIL",
            Self::Advisory => "ADVISORY",
            Self::NotApplicable => "NOT_APPLICABLE",
        })
    }
}

/// One line of the probe table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRow {
    pub probe: String,
    pub parameter: String,
    pub value: f64,
    pub stderr: f64,
    pub verdict: Verdict,
}

impl ProbeRow {
    pub fn new(probe: &str, parameter: impl Into<String>, value: f64, stderr: f64, verdict: Verdict) -> Self {
        Self { probe: probe.into(), parameter: parameter.into(), value, stderr, verdict }
    }
}

/// `phi = psi^gamma` with `psi` the standard mollifier rescaled to
/// `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestFunction<S> {
    pub lo: S,
    pub hi: S,
    pub gamma: S,
}

impl<S: Scalar> TestFunction<S> {
    /// Requires `gamma > 2(q+1)/q`.
    pub fn new(lo: S, hi: S, gamma: S, q: S) -> Result<Self> {
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "test function support [{lo}, {hi}] is not a bounded interval"
            )));
        }
        let threshold = Self::gamma_threshold(q);
        if !(gamma > threshold) {
            return Err(Error::InvalidParameter(format!(
                "test function exponent {gamma} must exceed 2(q+1)/q = {threshold}"
            )));
        }
        Ok(Self { lo, hi, gamma })
    }

    pub fn gamma_threshold(q: S) -> S {
        lit::<S>(2.0) * (q + S::one()) / q
    }

    pub fn width(&self) -> S {
        self.hi - self.lo
    }

    pub fn psi(&self, r: S) -> S {
        let u = (lit::<S>(2.0) * r - self.lo - self.hi) / self.width();
        if u.abs() >= S::one() {
            return S::zero();
        }
        (S::one() - S::one() / (S::one() - u * u)).exp()
    }

    pub fn phi(&self, r: S) -> S {
        let p = self.psi(r);
        if p == S::zero() {
            S::zero()
        } else {
            p.powf(self.gamma)
        }
    }

    /// The closed support must sit inside one interval of the finite region.
    pub fn check_support(&self, term: &TerminalSpec<S>) -> Result<()> {
        let inside = term.finite_region().iter().any(|(a, b)| self.lo > *a && self.hi < *b);
        if inside {
            Ok(())
        } else {
            Err(Error::SupportOverlap { lo: to_f64(self.lo), hi: to_f64(self.hi) })
        }
    }
}

/// `(q int_t^T a)^{-1/q}` at every node, infinite at the horizon.
pub fn apriori_bound<S: Scalar>(driver: &DriverSpec<S>, sol: &BsdeSolution<S>) -> Option<Vec<S>> {
    let q = driver.q?;
    driver.a.as_ref()?;
    let grid = &sol.grid;
    let horizon = grid.horizon();
    Some(
        grid.points()
            .iter()
            .map(|t| {
                let a = driver.a_integral(*t, horizon).expect("absorption coefficient");
                if a > S::zero() {
                    (q * a).powf(-S::one() / q)
                } else {
                    S::infinity()
                }
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct AprioriReport<S> {
    pub verdict: Verdict,
    pub reason: String,
    pub nodes: usize,
    /// Fraction of nodes with `Y <= bound` up to rounding.
    pub strict_fraction: S,
    /// Fraction of nodes with `Y <= bound + 3 SE`.
    pub within_se_fraction: S,
    /// Largest `Y / bound` over nodes before the horizon.
    pub worst_ratio: S,
    /// Smallest `Y / bound` over nodes before the horizon.
    pub least_ratio: S,
    /// Smallest `K` with `Y <= K bound` everywhere, for drivers outside the
    /// explicit case.
    pub fitted_constant: S,
}

/// Compares every level against `(q int_t^T a)^{-1/q}`. The bound is explicit
/// when `f(t,0,0) = 0` and `f` does not read `z`; other absorbing drivers
/// get an advisory fitted constant.
pub fn apriori_bound_check<S: Scalar>(solutions: &[BsdeSolution<S>], driver: &DriverSpec<S>) -> AprioriReport<S> {
    let empty = |verdict: Verdict, reason: &str| AprioriReport {
        verdict,
        reason: reason.into(),
        nodes: 0,
        strict_fraction: S::zero(),
        within_se_fraction: S::zero(),
        worst_ratio: S::zero(),
        least_ratio: S::zero(),
        fitted_constant: S::zero(),
    };
    let Some(first) = solutions.first() else {
        return empty(Verdict::NotApplicable, "no solutions");
    };
    let Some(bound) = apriori_bound(driver, first) else {
        return empty(Verdict::NotApplicable, "driver has no absorbing power term");
    };
    let explicit = driver.f0_vanishes && driver.lipschitz_z == S::zero();
    let three: S = lit(3.0);
    let rounding: S = lit(1e-12);
    let (mut total, mut strict, mut within) = (0usize, 0usize, 0usize);
    let mut worst = S::zero();
    let mut least = S::infinity();
    for sol in solutions {
        for p in 0..sol.n_paths {
            for (j, b) in bound.iter().enumerate() {
                let y = sol.y_at(p, j);
                total += 1;
                let slack = rounding * *b;
                if y <= *b + slack {
                    strict += 1;
                }
                if y <= *b + slack + three * sol.y_se_at(p, j) {
                    within += 1;
                }
                if b.is_finite() {
                    let r = y / *b;
                    worst = worst.max(r);
                    least = least.min(r);
                }
            }
        }
    }
    let strict_fraction = count::<S>(strict) / count(total.max(1));
    let within_se_fraction = count::<S>(within) / count(total.max(1));
    let (verdict, reason) = if explicit {
        (Verdict::from_bool(within_se_fraction >= lit(0.99)), "explicit bound".to_string())
    } else {
        (Verdict::Advisory, "bound constant unknown for this driver; fitted constant reported".to_string())
    };
    AprioriReport {
        verdict,
        reason,
        nodes: total,
        strict_fraction,
        within_se_fraction,
        worst_ratio: worst,
        least_ratio: least,
        fitted_constant: worst,
    }
}

/// Smallest admissible weight exponent: `2/q + 2(1 - 1/ell)`.
pub fn rho_threshold<S: Scalar>(q: S, ell: S) -> S {
    lit::<S>(2.0) / q + lit::<S>(2.0) * (S::one() - S::one() / ell)
}

/// Explicit energy constant of the toy driver, `16 (1/q)^{2/q}`.
pub fn toy_energy_bound<S: Scalar>(q: S) -> S {
    lit::<S>(16.0) * q.recip().powf(lit::<S>(2.0) / q)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZEnergy<S> {
    pub level: S,
    /// `E[int (T-s)^rho |Z|^2 ds]`.
    pub integral: MonteCarloEstimate<S>,
    /// `E[...]^{ell/2}` and its delta-method standard error.
    pub value: S,
    pub stderr: S,
}

fn check_rho<S: Scalar>(driver: &DriverSpec<S>, rho: S) -> Result<()> {
    let q = driver
        .q
        .ok_or_else(|| Error::InvalidParameter(format!("driver {} has no absorption exponent", driver.name)))?;
    let lower = rho_threshold(q, driver.ell);
    if !(rho > lower && rho < S::one()) {
        return Err(Error::RhoOutOfRange { rho: to_f64(rho), lower: to_f64(lower) });
    }
    Ok(())
}

pub fn z_weighted_energy<S: Scalar>(sol: &BsdeSolution<S>, driver: &DriverSpec<S>, rho: S) -> Result<ZEnergy<S>> {
    check_rho(driver, rho)?;
    let grid = &sol.grid;
    let horizon = grid.horizon();
    let weights: Vec<S> = (0..grid.steps()).map(|j| (horizon - grid.time(j)).powf(rho) * grid.dt(j)).collect();
    let per_path: Vec<S> = (0..sol.n_paths)
        .map(|p| {
            weights
                .iter()
                .enumerate()
                .fold(S::zero(), |s, (j, w)| s + *w * sol.z_at(p, j).iter().fold(S::zero(), |a, z| a + *z * *z))
        })
        .collect();
    let integral = mean_and_stderr(&per_path);
    let half_ell = driver.ell / lit(2.0);
    let value = integral.mean.powf(half_ell);
    let stderr = if integral.mean > S::zero() {
        half_ell * integral.mean.powf(half_ell - S::one()) * integral.stderr
    } else {
        S::zero()
    };
    Ok(ZEnergy { level: sol.level, integral, value, stderr })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZEnergyProfile<S> {
    pub rho: S,
    pub energies: Vec<ZEnergy<S>>,
    /// Every pair of levels agrees within two combined standard errors.
    pub flat: bool,
    /// `16 (1/q)^{2/q}` for the toy driver.
    pub bound: Option<S>,
    pub verdict: Verdict,
}

pub fn z_energy_profile<S: Scalar>(ladder: &Ladder<S>, driver: &DriverSpec<S>, rho: S) -> Result<ZEnergyProfile<S>> {
    let energies = ladder.solutions.iter().map(|s| z_weighted_energy(s, driver, rho)).collect::<Result<Vec<_>>>()?;
    let two: S = lit(2.0);
    let flat = energies.iter().enumerate().all(|(i, a)| {
        energies[i + 1..].iter().all(|b| {
            let se = (a.stderr * a.stderr + b.stderr * b.stderr).sqrt();
            (a.value - b.value).abs() <= two * se + lit::<S>(1e-12) * (S::one() + a.value.abs())
        })
    });
    let toy = driver.f0_vanishes && driver.lipschitz_z == S::zero() && driver.ell == S::one();
    let bound = driver.q.filter(|_| toy).map(toy_energy_bound);
    let below = bound.is_none_or(|b| energies.iter().all(|e| e.value <= b));
    Ok(ZEnergyProfile { rho, energies, flat, bound, verdict: Verdict::from_bool(flat && below) })
}

fn node_before_horizon<S: Scalar>(sol: &BsdeSolution<S>, eps: S) -> Result<usize> {
    let grid = &sol.grid;
    if !(eps > S::zero()) {
        return Err(Error::InvalidParameter(format!("offset {eps} from the horizon must be positive")));
    }
    grid.index_of(grid.horizon() - eps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlowupReport<S> {
    pub eps: Vec<S>,
    pub means: Vec<MonteCarloEstimate<S>>,
    pub slope: S,
    /// Fraction of paths in the stratum used.
    pub stratum_mass: S,
    pub singular_mass: S,
}

/// Log-log slope of `E[Y(T - eps)]` on paths whose terminal functional lies
/// at distance at least `delta` from the finite region. Without singular
/// paths the whole ensemble is used.
pub fn blowup_rate<S: Scalar>(
    ladder: &Ladder<S>,
    term: &TerminalSpec<S>,
    eps: &[S],
    delta: S,
) -> Result<BlowupReport<S>> {
    if eps.len() < 2 {
        return Err(Error::InvalidParameter("blow-up rate needs at least two offsets".into()));
    }
    let sol = ladder.limit();
    let prep = &ladder.prepared;
    let nodes = prep.nodes;
    let singular: Vec<bool> = prep.xi.iter().map(|x| x.is_infinite()).collect();
    let n_singular = singular.iter().filter(|s| **s).count();
    let stratum: Vec<usize> = if n_singular == 0 {
        (0..prep.n_paths).collect()
    } else {
        (0..prep.n_paths)
            .filter(|p| singular[*p] && term.distance_to_finite_region(prep.functional[p * nodes + nodes - 1]) >= delta)
            .collect()
    };
    let required: S = lit(0.05);
    let stratum_mass = count::<S>(stratum.len()) / count(prep.n_paths);
    if stratum_mass < required {
        return Err(Error::ThinStratum { mass: to_f64(stratum_mass), required: to_f64(required) });
    }
    let means = eps
        .iter()
        .map(|e| {
            let j = node_before_horizon(sol, *e)?;
            let ys: Vec<S> = stratum.iter().map(|p| sol.y_at(*p, j)).collect();
            Ok(mean_and_stderr(&ys))
        })
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<S> = means.iter().map(|m| m.mean).collect();
    let slope = if values.iter().all(|v| *v > S::zero()) { refinement_order(eps, &values) } else { S::zero() };
    Ok(BlowupReport {
        eps: eps.to_vec(),
        means,
        slope,
        stratum_mass,
        singular_mass: count::<S>(n_singular) / count(prep.n_paths),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuityReport<S> {
    pub times: Vec<S>,
    /// `E[Y(t_k) phi(F(t_k))]`.
    pub weighted_means: Vec<MonteCarloEstimate<S>>,
    /// Sample estimate of `E[xi phi(F(T))]` on the same paths.
    pub sample_target: MonteCarloEstimate<S>,
    /// Reference value the last probes are compared with.
    pub target: S,
    /// Distance of each probe to the sample target, paired path by path.
    pub distances: Vec<S>,
    /// Combined standard errors against the reference at each probe.
    pub combined_se: Vec<S>,
    pub bracketed: bool,
    pub decreasing: bool,
    pub verdict: Verdict,
}

/// Convergence in mean of `Y(t) phi(F(t))` to `xi phi(F(T))`. Passes when
/// the last two probes sit within two combined standard errors of the
/// reference and the paired distance to the sample target decreases over the
/// last three probes.
/// Without a `reference` the sample target is used.
pub fn weighted_terminal_continuity<S: Scalar>(
    ladder: &Ladder<S>,
    term: &TerminalSpec<S>,
    tf: &TestFunction<S>,
    times: &[S],
    reference: Option<S>,
) -> Result<ContinuityReport<S>> {
    tf.check_support(term)?;
    let sol = ladder.limit();
    let grid = &sol.grid;
    let horizon = grid.horizon();
    if times.is_empty() || times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !(*t < horizon)) {
        return Err(Error::InvalidParameter("probe times must increase strictly and stay before the horizon".into()));
    }
    let prep = &ladder.prepared;
    let nodes = prep.nodes;
    let weighted_terminal: Vec<S> = (0..prep.n_paths)
        .map(|p| {
            let w = tf.phi(prep.functional[p * nodes + nodes - 1]);
            if w == S::zero() {
                S::zero()
            } else {
                prep.xi[p] * w
            }
        })
        .collect();
    let sample_target = mean_and_stderr(&weighted_terminal);
    if !sample_target.mean.is_finite() {
        return Err(Error::InvalidParameter("weighted terminal value is not integrable".into()));
    }
    let target = reference.unwrap_or(sample_target.mean);
    let mut weighted_means = Vec::with_capacity(times.len());
    let mut distances = Vec::with_capacity(times.len());
    let mut combined_se = Vec::with_capacity(times.len());
    for t in times {
        let j = grid.index_of(*t)?;
        let vals: Vec<S> = (0..prep.n_paths).map(|p| sol.y_at(p, j) * tf.phi(prep.functional[p * nodes + j])).collect();
        let est = mean_and_stderr(&vals);
        let paired: Vec<S> = vals.iter().zip(&weighted_terminal).map(|(a, b)| *a - *b).collect();
        distances.push(mean_and_stderr(&paired).mean.abs());
        combined_se.push((est.stderr * est.stderr + sample_target.stderr * sample_target.stderr).sqrt());
        weighted_means.push(est);
    }
    let two: S = lit(2.0);
    let k = times.len();
    let bracketed = (k.saturating_sub(2)..k).all(|i| (weighted_means[i].mean - target).abs() <= two * combined_se[i]);
    let decreasing = distances[k.saturating_sub(3)..].windows(2).all(|w| w[1] < w[0]);
    Ok(ContinuityReport {
        times: times.to_vec(),
        weighted_means,
        sample_target,
        target,
        distances,
        combined_se,
        bracketed,
        decreasing,
        verdict: Verdict::from_bool(bracketed && decreasing),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiminfRow<S> {
    pub eps: S,
    pub threshold: S,
    /// Mean of `|Y(T - eps) - xi|` over finite paths.
    pub finite_error: S,
    /// Fraction of finite paths with `|Y(T - eps) - xi| <= tol`.
    pub finite_pass_rate: S,
    /// Fraction of singular paths with `Y(T - eps) >= threshold`.
    pub singular_pass_rate: S,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiminfReport<S> {
    pub rows: Vec<LiminfRow<S>>,
    /// `Y(T - eps_k)` per path and offset, `n_paths x eps.len()`.
    pub per_path: Vec<S>,
    pub finite_paths: usize,
    pub singular_paths: usize,
}

/// Evaluates `Y(T - eps)` of the highest level along a decreasing schedule
/// and compares it with `xi`, capped at that level.
pub fn ladder_pathwise_liminf<S: Scalar>(
    ladder: &Ladder<S>,
    eps: &[S],
    thresholds: &[S],
    tol: S,
) -> Result<LiminfReport<S>> {
    if eps.len() != thresholds.len() {
        return Err(Error::Shape(format!("{} offsets but {} thresholds", eps.len(), thresholds.len())));
    }
    let sol = ladder.limit();
    let xi = &ladder.prepared.xi;
    let idx = eps.iter().map(|e| node_before_horizon(sol, *e)).collect::<Result<Vec<_>>>()?;
    let per_path: Vec<S> = (0..sol.n_paths).flat_map(|p| idx.iter().map(move |j| sol.y_at(p, *j))).collect();
    let finite: Vec<usize> = (0..sol.n_paths).filter(|p| xi[*p].is_finite()).collect();
    let singular: Vec<usize> = (0..sol.n_paths).filter(|p| xi[*p].is_infinite()).collect();
    let frac = |hits: usize, of: usize| if of == 0 { S::one() } else { count::<S>(hits) / count(of) };
    let rows = eps
        .iter()
        .zip(thresholds)
        .enumerate()
        .map(|(k, (e, th))| {
            let y = |p: usize| per_path[p * eps.len() + k];
            let errs: Vec<S> = finite.iter().map(|p| (y(*p) - xi[*p].min(sol.level)).abs()).collect();
            let finite_error =
                if errs.is_empty() { S::zero() } else { errs.iter().copied().sum::<S>() / count(errs.len()) };
            LiminfRow {
                eps: *e,
                threshold: *th,
                finite_error,
                finite_pass_rate: frac(errs.iter().filter(|v| **v <= tol).count(), errs.len()),
                singular_pass_rate: frac(singular.iter().filter(|p| y(**p) >= *th).count(), singular.len()),
            }
        })
        .collect();
    Ok(LiminfReport { rows, per_path, finite_paths: finite.len(), singular_paths: singular.len() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItoRow<S> {
    pub steps: usize,
    pub dt: S,
    /// `E|residual|` over paths.
    pub mean_abs: MonteCarloEstimate<S>,
    pub max_abs: S,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItoStudy<S> {
    pub functional: String,
    pub rows: Vec<ItoRow<S>>,
    /// Slope of `log E|residual|` against `log dt`; undefined when a residual
    /// vanishes.
    pub order: Option<S>,
    pub max_abs: S,
}

/// Change-of-variable residuals on `refinements + 1` nested dyadic grids
/// driven by the same Brownian increments.
#[allow(clippy::too_many_arguments)]
pub fn ito_refinement_study<S: Scalar>(
    f: &FunctionalSpec<S>,
    model: &SdeModel<S>,
    horizon: S,
    base_steps: usize,
    refinements: u32,
    n_paths: usize,
    seed: u64,
    stencil: &DerivativeStencil<S>,
) -> Result<ItoStudy<S>> {
    if f.dim != model.dim {
        return Err(Error::Shape(format!("functional of dimension {} on a model of dimension {}", f.dim, model.dim)));
    }
    let finest = base_steps << refinements;
    let fine_grid = Arc::new(TimeGrid::uniform(horizon, finest)?);
    let fine = euler_simulate(model, fine_grid, n_paths, seed)?;
    let mut rows = Vec::new();
    for k in 0..=refinements {
        let steps = base_steps << k;
        let factor = finest / steps;
        let grid = Arc::new(TimeGrid::uniform(horizon, steps)?);
        let dw = aggregate_increments(fine.all_dw(), model.dim, factor);
        let ens = euler_simulate_from_increments(model, grid.clone(), &dw, seed)?;
        let residuals = (0..n_paths)
            .into_par_iter()
            .map(|p| ito_residual(f, &ens.path(p), &ens.qv_path(p), stencil).map(|r| r.abs()))
            .collect::<Result<Vec<S>>>()?;
        let max_abs = residuals.iter().copied().fold(S::zero(), S::max);
        rows.push(ItoRow { steps, dt: grid.dt(0), mean_abs: mean_and_stderr(&residuals), max_abs });
    }
    let dts: Vec<S> = rows.iter().map(|r| r.dt).collect();
    let errs: Vec<S> = rows.iter().map(|r| r.mean_abs.mean).collect();
    let order = errs.iter().all(|e| *e > S::zero()).then(|| refinement_order(&dts, &errs));
    let max_abs = rows.iter().map(|r| r.max_abs).fold(S::zero(), S::max);
    Ok(ItoStudy { functional: f.name.clone(), rows, order, max_abs })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::bsde::truncation_ladder;
    use crate::paths::TimeGrid;
    use crate::regression::RegressionBasis;
    use crate::sde::{euler_simulate, SdeModel};

    fn deterministic_ladder(terminal: f64, levels: &[f64], steps: usize) -> (Ladder<f64>, TerminalSpec<f64>) {
        let grid = Arc::new(TimeGrid::uniform(1.0, steps).unwrap());
        let model = SdeModel::drifted_brownian(vec![0.0], vec![0.0], 0.0);
        let ens = euler_simulate(&model, grid, 4, 1).unwrap();
        let term = TerminalSpec::constant(terminal, 1);
        let ladder =
            truncation_ladder(&ens, &DriverSpec::toy(3.0), &term, levels, &RegressionBasis::standard(1), 1e-3).unwrap();
        (ladder, term)
    }

    #[test]
    fn ito_study_orders() {
        let model = SdeModel::brownian(1);
        let st = DerivativeStencil::default();
        let lin = ito_refinement_study(&FunctionalSpec::state(1, 0), &model, 1.0, 8, 2, 20, 4, &st).unwrap();
        assert!(lin.max_abs < 1e-12);
        let sq = ito_refinement_study(&FunctionalSpec::square_minus_qv(1), &model, 1.0, 16, 3, 200, 4, &st).unwrap();
        let order = sq.order.unwrap();
        assert!(order > 0.35 && order < 0.65, "{order}");
        assert_eq!(sq.rows.len(), 4);
        assert!(sq.rows.windows(2).all(|w| w[1].steps == 2 * w[0].steps));
    }

    #[test]
    fn mollifier_shape() {
        let tf = TestFunction::<f64>::new(0.5, 2.0, 3.0, 3.0).unwrap();
        assert_eq!(tf.phi(0.5), 0.0);
        assert_eq!(tf.phi(2.0), 0.0);
        assert!((tf.psi(1.25) - 1.0).abs() < 1e-15);
        assert!(tf.phi(1.0) > 0.0 && tf.phi(1.0) < 1.0);
        assert!(TestFunction::new(0.5, 2.0, 8.0 / 3.0, 3.0).is_err());
    }

    #[test]
    fn support_must_avoid_singular_set() {
        let term = TerminalSpec::<f64>::positive_part_singular(1);
        assert!(TestFunction::new(0.5, 2.0, 3.0, 3.0).unwrap().check_support(&term).is_ok());
        let straddle = TestFunction::new(-0.5, 1.0, 3.0, 3.0).unwrap();
        assert!(matches!(straddle.check_support(&term), Err(Error::SupportOverlap { .. })));
    }

    #[test]
    fn apriori_ratio_for_singular_and_finite_terminal() {
        let (ladder, _) = deterministic_ladder(f64::INFINITY, &[1e6], 1000);
        let r = apriori_bound_check(&ladder.solutions, &DriverSpec::toy(3.0));
        assert_eq!(r.verdict, Verdict::Pass);
        assert!((r.worst_ratio - 1.0).abs() < 1e-9 && (r.least_ratio - 1.0).abs() < 1e-9, "{r:?}");
        let (ladder, _) = deterministic_ladder(1.0, &[10.0], 1000);
        let r = apriori_bound_check(&ladder.solutions, &DriverSpec::toy(3.0));
        assert_eq!(r.strict_fraction, 1.0);
        assert!(r.worst_ratio < 1.0);
    }

    #[test]
    fn apriori_not_applicable_without_power() {
        let (ladder, _) = deterministic_ladder(1.0, &[10.0], 10);
        let r = apriori_bound_check(&ladder.solutions, &DriverSpec::zero());
        assert_eq!(r.verdict, Verdict::NotApplicable);
    }

    #[test]
    fn energy_vanishes_without_noise_and_checks_rho() {
        let (ladder, _) = deterministic_ladder(f64::INFINITY, &[10.0, 100.0], 100);
        let d = DriverSpec::toy(3.0);
        let prof = z_energy_profile(&ladder, &d, 0.8).unwrap();
        assert!(prof.energies.iter().all(|e| e.value == 0.0));
        assert!((prof.bound.unwrap() - 7.691_998).abs() < 1e-6);
        assert_eq!(prof.verdict, Verdict::Pass);
        assert!(matches!(z_weighted_energy(ladder.last(), &d, 0.6), Err(Error::RhoOutOfRange { .. })));
        assert!(matches!(z_weighted_energy(ladder.last(), &d, 1.0), Err(Error::RhoOutOfRange { .. })));
    }

    #[test]
    fn blowup_slope_of_exact_singular_solution() {
        let (ladder, term) = deterministic_ladder(f64::INFINITY, &[1e6], 1024);
        let eps: Vec<f64> = (4..=9).map(|k| 2f64.powi(-k)).collect();
        let r = blowup_rate(&ladder, &term, &eps, 0.1).unwrap();
        assert!((r.slope + 1.0 / 3.0).abs() < 1e-9, "{:?}", r);
        let (ladder, term) = deterministic_ladder(1.0, &[10.0], 1024);
        let r = blowup_rate(&ladder, &term, &eps, 0.1).unwrap();
        // (1 + 3 eps)^{-1/3} is nearly flat over the schedule.
        assert!(r.slope < 0.0 && r.slope > -0.02, "{}", r.slope);
    }

    #[test]
    fn liminf_schedule() {
        let (ladder, _) = deterministic_ladder(f64::INFINITY, &[1e6], 1024);
        let eps: Vec<f64> = (4..=9).map(|k| 2f64.powi(-k)).collect();
        let th: Vec<f64> = eps.iter().map(|e| 0.99 * (3.0 * e).powf(-1.0 / 3.0)).collect();
        let r = ladder_pathwise_liminf(&ladder, &eps, &th, 0.1).unwrap();
        assert!(r.rows.iter().all(|row| row.singular_pass_rate == 1.0));
        let (ladder, _) = deterministic_ladder(1.0, &[10.0], 1024);
        let r = ladder_pathwise_liminf(&ladder, &eps, &th, 0.01).unwrap();
        assert!(r.rows.windows(2).all(|w| w[1].finite_error < w[0].finite_error));
        assert_eq!(r.rows.last().unwrap().finite_pass_rate, 1.0);
    }

    #[test]
    fn continuity_without_driver_is_exact_in_mean() {
        let grid = Arc::new(TimeGrid::uniform(1.0, 64).unwrap());
        let model = SdeModel::drifted_brownian(vec![1.0], vec![0.0], 0.0);
        let ens = euler_simulate(&model, grid, 8, 3).unwrap();
        let term = TerminalSpec::<f64>::positive_part_singular(1);
        let ladder =
            truncation_ladder(&ens, &DriverSpec::zero(), &term, &[10.0], &RegressionBasis::standard(1), 1e-3).unwrap();
        let tf = TestFunction::new(0.5, 2.0, 3.0, 3.0).unwrap();
        let r = weighted_terminal_continuity(&ladder, &term, &tf, &[0.5, 0.75, 0.875], None).unwrap();
        for m in &r.weighted_means {
            assert!((m.mean - r.target).abs() < 1e-12);
        }
        let bad = TestFunction::new(-0.5, 1.0, 3.0, 3.0).unwrap();
        assert!(weighted_terminal_continuity(&ladder, &term, &bad, &[0.5], None).is_err());
    }
}
