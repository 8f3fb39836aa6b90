//! Backward least-squares Monte Carlo for truncated BSDEs
//! `Y = xi ^ n + int f_n(s, Y, Z) ds - int Z dW` under the Brownian
//! filtration, the increasing ladder over truncation levels, and a
//! deterministic ODE oracle for noiseless problems.

use std::fmt;

use rayon::prelude::*;

use crate::drivers::{DriverContext, DriverKind, DriverSpec};
use crate::error::{Error, Result};
use crate::functional::FunctionalSpec;
use crate::paths::{PathRef, TimeGrid};
use crate::regression::{regress, Feature, RegressionBasis};
use crate::sde::Ensemble;
use crate::{count, lit, to_f64, Scalar};

/// Interval of the real line with optional closed ends; infinite ends are
/// always open.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval<S> {
    pub lo: S,
    pub hi: S,
    pub lo_closed: bool,
    pub hi_closed: bool,
}

impl<S: Scalar> Interval<S> {
    pub fn open(lo: S, hi: S) -> Self {
        Self { lo, hi, lo_closed: false, hi_closed: false }
    }

    pub fn real_line() -> Self {
        Self::open(S::neg_infinity(), S::infinity())
    }

    pub fn contains(&self, r: S) -> bool {
        let above = if self.lo_closed { r >= self.lo } else { r > self.lo };
        let below = if self.hi_closed { r <= self.hi } else { r < self.hi };
        above && below
    }

    /// Parses `"(a,b]"`-style notation; `inf` and `-inf` are accepted.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("cannot parse interval {s:?}"));
        if s.len() < 5 {
            return Err(bad());
        }
        let lo_closed = match s.as_bytes()[0] {
            b'[' => true,
            b'(' => false,
            _ => return Err(bad()),
        };
        let hi_closed = match s.as_bytes()[s.len() - 1] {
            b']' => true,
            b')' => false,
            _ => return Err(bad()),
        };
        let inner = &s[1..s.len() - 1];
        let (a, b) = inner.split_once(',').ok_or_else(bad)?;
        let num = |t: &str| -> Result<S> {
            let v: f64 = match t.trim() {
                "inf" | "+inf" => f64::INFINITY,
                "-inf" => f64::NEG_INFINITY,
                other => other.parse().map_err(|_| bad())?,
            };
            Ok(lit(v))
        };
        let (lo, hi) = (num(a)?, num(b)?);
        if !(lo < hi) || (lo_closed && lo.is_infinite()) || (hi_closed && hi.is_infinite()) {
            return Err(bad());
        }
        Ok(Self { lo, hi, lo_closed, hi_closed })
    }
}

impl<S: Scalar> fmt::Display for Interval<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}{},{}{}",
            if self.lo_closed { '[' } else { '(' },
            self.lo,
            self.hi,
            if self.hi_closed { ']' } else { ')' }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PieceRule<S> {
    Infinite,
    Constant(S),
    /// `slope * r + intercept`.
    Affine {
        slope: S,
        intercept: S,
    },
    /// `coef * |r|^exponent`.
    Power {
        coef: S,
        exponent: S,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Piece<S> {
    pub interval: Interval<S>,
    pub rule: PieceRule<S>,
}

/// Piecewise terminal map `Phi: R -> [0, +inf]`; the pieces partition the
/// real line.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewisePhi<S> {
    pieces: Vec<Piece<S>>,
}

impl<S: Scalar> PiecewisePhi<S> {
    pub fn new(mut pieces: Vec<Piece<S>>) -> Result<Self> {
        if pieces.is_empty() {
            return Err(Error::Config("terminal map has no pieces".into()));
        }
        pieces.sort_by(|a, b| a.interval.lo.partial_cmp(&b.interval.lo).unwrap_or(std::cmp::Ordering::Equal));
        let first = &pieces[0].interval;
        let last = &pieces[pieces.len() - 1].interval;
        if first.lo != S::neg_infinity() || last.hi != S::infinity() {
            return Err(Error::Config("terminal map pieces must cover the real line".into()));
        }
        for w in pieces.windows(2) {
            let (a, b) = (&w[0].interval, &w[1].interval);
            if a.hi != b.lo || a.hi_closed == b.lo_closed {
                return Err(Error::Config(format!("pieces {a} and {b} do not meet exactly")));
            }
        }
        for p in &pieces {
            let negative = match p.rule {
                PieceRule::Infinite => false,
                PieceRule::Constant(c) => c < S::zero(),
                PieceRule::Affine { slope, intercept } => {
                    let at = |r: S| if r.is_infinite() { slope * r } else { slope * r + intercept };
                    at(p.interval.lo) < S::zero() || at(p.interval.hi) < S::zero()
                }
                PieceRule::Power { coef, .. } => coef < S::zero(),
            };
            if negative {
                return Err(Error::Config(format!("terminal map is negative on {}", p.interval)));
            }
        }
        Ok(Self { pieces })
    }

    pub fn constant(c: S) -> Self {
        let rule = if c.is_infinite() { PieceRule::Infinite } else { PieceRule::Constant(c) };
        Self { pieces: vec![Piece { interval: Interval::real_line(), rule }] }
    }

    pub fn pieces(&self) -> &[Piece<S>] {
        &self.pieces
    }

    pub fn eval(&self, r: S) -> S {
        for p in &self.pieces {
            if p.interval.contains(r) {
                return match p.rule {
                    PieceRule::Infinite => S::infinity(),
                    PieceRule::Constant(c) => c,
                    PieceRule::Affine { slope, intercept } => (slope * r + intercept).max(S::zero()),
                    PieceRule::Power { coef, exponent } => coef * r.abs().powf(exponent),
                };
            }
        }
        S::infinity()
    }

    /// Open intervals whose union is the interior of `{Phi < inf}`.
    pub fn finite_region(&self) -> Vec<(S, S)> {
        let mut out: Vec<(S, S)> = Vec::new();
        for p in &self.pieces {
            if matches!(p.rule, PieceRule::Infinite) {
                continue;
            }
            let (lo, hi) = (p.interval.lo, p.interval.hi);
            match out.last_mut() {
                Some(last) if last.1 == lo => last.1 = hi,
                _ => out.push((lo, hi)),
            }
        }
        out
    }
}

/// `xi = Phi(F(T, X_T, A_T))`.
#[derive(Debug, Clone)]
pub struct TerminalSpec<S> {
    pub phi: PiecewisePhi<S>,
    pub functional: FunctionalSpec<S>,
}

impl<S: Scalar> TerminalSpec<S> {
    pub fn new(phi: PiecewisePhi<S>, functional: FunctionalSpec<S>) -> Self {
        Self { phi, functional }
    }

    /// `xi = c` for every path, infinite allowed.
    pub fn constant(c: S, dim: usize) -> Self {
        Self::new(PiecewisePhi::constant(c), FunctionalSpec::state(dim, 0))
    }

    /// `Phi(r) = +inf` for `r <= 0` and `r` for `r > 0`, applied to `X_1(T)`.
    pub fn positive_part_singular(dim: usize) -> Self {
        let phi = PiecewisePhi::new(vec![
            Piece {
                interval: Interval { lo: S::neg_infinity(), hi: S::zero(), lo_closed: false, hi_closed: true },
                rule: PieceRule::Infinite,
            },
            Piece {
                interval: Interval::open(S::zero(), S::infinity()),
                rule: PieceRule::Affine { slope: S::one(), intercept: S::zero() },
            },
        ])
        .expect("valid pieces");
        Self::new(phi, FunctionalSpec::state(dim, 0))
    }

    pub fn finite_region(&self) -> Vec<(S, S)> {
        self.phi.finite_region()
    }

    /// Distance from `r` to the finite region (0 inside it).
    pub fn distance_to_finite_region(&self, r: S) -> S {
        self.finite_region()
            .iter()
            .map(|(lo, hi)| {
                if r > *lo && r < *hi {
                    S::zero()
                } else if r <= *lo {
                    *lo - r
                } else {
                    r - *hi
                }
            })
            .fold(S::infinity(), S::min)
    }

    /// `F(t_j, X_{t_j}, A_{t_j})` for every path and node, `n_paths x (N+1)`.
    pub fn functional_values(&self, ens: &Ensemble<S>) -> Vec<S> {
        (0..ens.n_paths)
            .into_par_iter()
            .flat_map_iter(|p| self.functional.values_along(&ens.grid, ens.x(p), ens.a(p)))
            .collect()
    }

    pub fn terminal_values_from(&self, fvals: &[S], nodes: usize) -> Vec<S> {
        fvals.chunks(nodes).map(|row| self.phi.eval(row[nodes - 1])).collect()
    }

    pub fn terminal_values(&self, ens: &Ensemble<S>) -> Vec<S> {
        self.terminal_values_from(&self.functional_values(ens), ens.nodes())
    }
}

/// Fraction of paths with `xi = +inf`.
pub fn singular_mass<S: Scalar>(xi: &[S]) -> S {
    count::<S>(xi.iter().filter(|v| v.is_infinite()).count()) / count(xi.len().max(1))
}

/// Ensemble quantities shared by every level of a ladder.
#[derive(Debug, Clone)]
pub struct Prepared<S> {
    pub n_paths: usize,
    pub nodes: usize,
    /// `n_paths x (N+1)`.
    pub functional: Vec<S>,
    pub xi: Vec<S>,
    /// Per node, `n_paths x k` feature rows.
    features: Vec<Vec<S>>,
    pub n_features: usize,
}

pub fn prepare<S: Scalar>(
    ens: &Ensemble<S>,
    term: &TerminalSpec<S>,
    basis: &RegressionBasis<S>,
) -> Result<Prepared<S>> {
    if term.functional.dim != ens.dim {
        return Err(Error::Shape(format!(
            "terminal functional of dimension {} on an ensemble of dimension {}",
            term.functional.dim, ens.dim
        )));
    }
    for f in &basis.features {
        let i = match f {
            Feature::State(i) | Feature::RunningIntegral(i) | Feature::RunningMax(i) => *i,
            Feature::Functional => 0,
        };
        if i >= ens.dim {
            return Err(Error::Config(format!("feature {f:?} beyond state dimension {}", ens.dim)));
        }
    }
    let nodes = ens.nodes();
    let functional = term.functional_values(ens);
    let xi = term.terminal_values_from(&functional, nodes);
    let k = basis.features.len();
    let d = ens.dim;
    let grid = &ens.grid;
    let per_path: Vec<Vec<S>> = (0..ens.n_paths)
        .into_par_iter()
        .map(|p| {
            let x = ens.x(p);
            let mut integral = vec![S::zero(); d];
            let mut max: Vec<S> = x[..d].to_vec();
            let mut rows = Vec::with_capacity(nodes * k);
            for j in 0..nodes {
                if j > 0 {
                    for i in 0..d {
                        integral[i] = integral[i] + x[(j - 1) * d + i] * grid.dt(j - 1);
                        max[i] = max[i].max(x[j * d + i]);
                    }
                }
                for f in &basis.features {
                    rows.push(match f {
                        Feature::State(i) => x[j * d + i],
                        Feature::Functional => functional[p * nodes + j],
                        Feature::RunningIntegral(i) => integral[*i],
                        Feature::RunningMax(i) => max[*i],
                    });
                }
            }
            rows
        })
        .collect();
    let mut features = vec![Vec::with_capacity(ens.n_paths * k); nodes];
    for rows in &per_path {
        for (j, feat) in features.iter_mut().enumerate() {
            feat.extend_from_slice(&rows[j * k..(j + 1) * k]);
        }
    }
    Ok(Prepared { n_paths: ens.n_paths, nodes, functional, xi, features, n_features: k })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions<S> {
    pub newton_tol: S,
    pub max_iterations: usize,
}

impl<S: Scalar> Default for SolverOptions<S> {
    fn default() -> Self {
        Self { newton_tol: lit(1e-12), max_iterations: 50 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveDiagnostics<S> {
    /// Root mean square residual of the continuation regression per step.
    pub residual_rms: Vec<S>,
    /// Largest per-step mean of the negative part of `Y` before clipping.
    pub negative_mass: S,
    pub max_iterations_used: usize,
}

#[derive(Debug, Clone)]
pub struct BsdeSolution<S> {
    pub grid: std::sync::Arc<TimeGrid<S>>,
    /// Truncation level `n`.
    pub level: S,
    pub n_paths: usize,
    pub dim: usize,
    /// `n_paths x (N+1)`.
    y: Vec<S>,
    /// Standard error of the conditional expectation at each node.
    y_se: Vec<S>,
    /// `n_paths x N x d`.
    z: Vec<S>,
    pub basis: RegressionBasis<S>,
    pub diagnostics: SolveDiagnostics<S>,
}

impl<S: Scalar> BsdeSolution<S> {
    pub fn nodes(&self) -> usize {
        self.grid.steps() + 1
    }

    pub fn y(&self, path: usize) -> &[S] {
        let n = self.nodes();
        &self.y[path * n..(path + 1) * n]
    }

    pub fn y_at(&self, path: usize, j: usize) -> S {
        self.y[path * self.nodes() + j]
    }

    pub fn y_se_at(&self, path: usize, j: usize) -> S {
        self.y_se[path * self.nodes() + j]
    }

    pub fn z_at(&self, path: usize, j: usize) -> &[S] {
        let w = self.grid.steps() * self.dim;
        &self.z[path * w + j * self.dim..path * w + (j + 1) * self.dim]
    }

    /// Values of `Y(t_j)` over paths.
    pub fn column(&self, j: usize) -> Vec<S> {
        (0..self.n_paths).map(|p| self.y_at(p, j)).collect()
    }

    pub fn all_y(&self) -> &[S] {
        &self.y
    }

    pub fn all_z(&self) -> &[S] {
        &self.z
    }
}

/// Safeguarded Newton iteration on an increasing-at-the-root scalar map,
/// with bisection once a sign change is bracketed.
fn solve_scalar<S: Scalar, G: Fn(S) -> S>(
    g: G,
    x0: S,
    tol: S,
    max_iter: usize,
) -> std::result::Result<(S, usize), (S, usize)> {
    let mut x = x0;
    let mut gx = g(x);
    let mut lo: Option<(S, S)> = None;
    let mut hi: Option<(S, S)> = None;
    for it in 1..=max_iter {
        if !gx.is_finite() {
            return Err((gx, it));
        }
        if gx.abs() <= tol * (S::one() + x.abs()) {
            return Ok((x, it - 1));
        }
        if gx < S::zero() {
            lo = Some((x, gx));
        } else {
            hi = Some((x, gx));
        }
        let h = lit::<S>(1e-7) * (S::one() + x.abs());
        let slope = (g(x + h) - gx) / h;
        let mut next = x - gx / slope;
        let inside = |v: S| lo.is_none_or(|(a, _)| v > a) && hi.is_none_or(|(b, _)| v < b) && v.is_finite();
        if !inside(next) || !slope.is_finite() || slope == S::zero() {
            next = match (lo, hi) {
                (Some((a, _)), Some((b, _))) => (a + b) / lit(2.0),
                (Some((a, _)), None) => a + (S::one() + a.abs()),
                (None, Some((b, _))) => b - (S::one() + b.abs()),
                (None, None) => x + S::one(),
            };
        }
        if let (Some((a, _)), Some((b, _))) = (lo, hi) {
            if (b - a).abs() <= tol * (S::one() + a.abs()) {
                return Ok(((a + b) / lit(2.0), it));
            }
        }
        x = next;
        gx = g(x);
    }
    if gx.abs() <= tol * (S::one() + x.abs()) {
        Ok((x, max_iter))
    } else {
        Err((gx, max_iter))
    }
}

/// `Y` after a backward step of length `dt` of `Y' = -a Y|Y|^q` starting
/// from `w`, with `int a = a_int` over the step.
fn power_flow<S: Scalar>(w: S, q: S, a_int: S) -> S {
    if w == S::zero() {
        return S::zero();
    }
    let u = w.abs().powf(-q) + q * a_int;
    w.signum() * u.powf(-S::one() / q)
}

/// One backward induction for the driver truncated at `level`.
pub fn solve_truncated<S: Scalar>(
    ens: &Ensemble<S>,
    driver: &DriverSpec<S>,
    term: &TerminalSpec<S>,
    level: S,
    basis: &RegressionBasis<S>,
) -> Result<BsdeSolution<S>> {
    let prep = prepare(ens, term, basis)?;
    solve_prepared(ens, &prep, driver, level, basis, &SolverOptions::default())
}

pub fn solve_prepared<S: Scalar>(
    ens: &Ensemble<S>,
    prep: &Prepared<S>,
    driver: &DriverSpec<S>,
    level: S,
    basis: &RegressionBasis<S>,
    opts: &SolverOptions<S>,
) -> Result<BsdeSolution<S>> {
    if !ens.has_increments() {
        return Err(Error::MissingInput("Brownian increments of the ensemble".into()));
    }
    let drv = driver.truncate(level)?;
    let grid = ens.grid.clone();
    let n = grid.steps();
    let nodes = n + 1;
    let np = ens.n_paths;
    let d = ens.dim;
    let k = prep.n_features;
    let mut y = vec![S::zero(); np * nodes];
    let mut y_se = vec![S::zero(); np * nodes];
    let mut z = vec![S::zero(); np * n * d];
    for p in 0..np {
        y[p * nodes + n] = prep.xi[p].min(level);
    }
    let split = drv.q.filter(|_| drv.a.is_some());
    let mut residual_rms = vec![S::zero(); n];
    let mut negative_mass = S::zero();
    let mut max_iters = 0usize;
    let mut next: Vec<S> = (0..np).map(|p| y[p * nodes + n]).collect();
    for j in (0..n).rev() {
        let t = grid.time(j);
        let dt = grid.dt(j);
        let feats = &prep.features[j];
        // Absorption first, exactly and pathwise; the regressand stays
        // below the singular solution started at the next node.
        if let Some(q) = split {
            let a_int = drv.a_integral(t, t + dt).expect("absorption coefficient");
            for v in next.iter_mut() {
                *v = power_flow(*v, q, a_int);
            }
        }
        let cont = regress(feats, k, &next, 1, basis, j)?;
        residual_rms[j] = cont.residual_rms[0];
        let mut ztarget = vec![S::zero(); np * d];
        for p in 0..np {
            let excess = next[p] - cont.fitted[p];
            let dw = ens.dw_at(p, j);
            for i in 0..d {
                ztarget[p * d + i] = excess * dw[i] / dt;
            }
        }
        let zfit = regress(feats, k, &ztarget, d, basis, j)?;
        let solved: Vec<Result<(S, usize)>> = (0..np)
            .into_par_iter()
            .map(|p| {
                let c = cont.fitted[p];
                let zp = &zfit.fitted[p * d..(p + 1) * d];
                let ctx = DriverContext { path: Some(PathRef::new(&grid, ens.x(p), d, j)) };
                let fail = |residual: S, iterations: usize| Error::RootFind {
                    step: j,
                    path: p,
                    residual: to_f64(residual),
                    iterations,
                };
                let g = |v: S| {
                    let rate = if split.is_some() {
                        drv.remainder_at(t, v, zp, &ctx).expect("absorption coefficient")
                    } else {
                        (drv.f)(t, v, zp, &ctx)
                    };
                    v - c - dt * rate
                };
                solve_scalar(g, c, opts.newton_tol, opts.max_iterations).map_err(|(r, it)| fail(r, it))
            })
            .collect();
        let mut neg = S::zero();
        for (p, r) in solved.into_iter().enumerate() {
            let (v, it) = r?;
            if !v.is_finite() {
                return Err(Error::NonFiniteDriver { t: to_f64(t), y: to_f64(v) });
            }
            max_iters = max_iters.max(it);
            neg = neg + (-v).max(S::zero());
            let v = v.max(S::zero());
            y[p * nodes + j] = v;
            y_se[p * nodes + j] = cont.stderr[p];
            next[p] = v;
            z[p * n * d + j * d..p * n * d + (j + 1) * d].copy_from_slice(&zfit.fitted[p * d..(p + 1) * d]);
        }
        negative_mass = negative_mass.max(neg / count(np));
    }
    Ok(BsdeSolution {
        grid,
        level,
        n_paths: np,
        dim: d,
        y,
        y_se,
        z,
        basis: basis.clone(),
        diagnostics: SolveDiagnostics { residual_rms, negative_mass, max_iterations_used: max_iters },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairComparison<S> {
    pub lower: S,
    pub upper: S,
    /// Fraction of nodes with `Y^m > Y^n + 3 SE`.
    pub violating_fraction: S,
    /// Largest `Y^m - Y^n` and where it occurs `(path, step)`.
    pub worst_excess: S,
    pub worst_node: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct Ladder<S> {
    pub levels: Vec<S>,
    pub solutions: Vec<BsdeSolution<S>>,
    pub comparisons: Vec<PairComparison<S>>,
    /// Mean over paths of `Y^{n_k}(0) - Y^{n_{k-1}}(0)`.
    pub increments: Vec<S>,
    /// Ratio of the last two increments: small values indicate convergence.
    pub increment_ratio: Option<S>,
    /// The ladder is only certified on `[0, T - eps]`.
    pub certified_until: S,
    pub prepared: Prepared<S>,
    pub warnings: Vec<String>,
}

impl<S: Scalar> Ladder<S> {
    pub fn last(&self) -> &BsdeSolution<S> {
        self.solutions.last().expect("ladder has at least one level")
    }

    /// Estimate of the minimal supersolution: the highest level.
    pub fn limit(&self) -> &BsdeSolution<S> {
        self.last()
    }
}

pub fn compare_levels<S: Scalar>(lo: &BsdeSolution<S>, hi: &BsdeSolution<S>, certified: usize) -> PairComparison<S> {
    let three: S = lit(3.0);
    let mut bad = 0usize;
    let mut total = 0usize;
    let mut worst = S::neg_infinity();
    let mut worst_node = (0, 0);
    for p in 0..lo.n_paths {
        for j in 0..=certified {
            let (a, b) = (lo.y_at(p, j), hi.y_at(p, j));
            let se = (lo.y_se_at(p, j).powi(2) + hi.y_se_at(p, j).powi(2)).sqrt();
            total += 1;
            if a > b + three * se + lit::<S>(1e-12) * (S::one() + b.abs()) {
                bad += 1;
            }
            if a - b > worst {
                worst = a - b;
                worst_node = (p, j);
            }
        }
    }
    PairComparison {
        lower: lo.level,
        upper: hi.level,
        violating_fraction: count::<S>(bad) / count(total.max(1)),
        worst_excess: worst,
        worst_node,
    }
}

/// Solves every level and compares adjacent ones on `[0, T - eps]`.
pub fn truncation_ladder<S: Scalar>(
    ens: &Ensemble<S>,
    driver: &DriverSpec<S>,
    term: &TerminalSpec<S>,
    levels: &[S],
    basis: &RegressionBasis<S>,
    eps: S,
) -> Result<Ladder<S>> {
    truncation_ladder_with(ens, driver, term, levels, basis, eps, &SolverOptions::default())
}

/// [`truncation_ladder`] with explicit Newton settings.
pub fn truncation_ladder_with<S: Scalar>(
    ens: &Ensemble<S>,
    driver: &DriverSpec<S>,
    term: &TerminalSpec<S>,
    levels: &[S],
    basis: &RegressionBasis<S>,
    eps: S,
    opts: &SolverOptions<S>,
) -> Result<Ladder<S>> {
    if levels.is_empty() || levels.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter("truncation levels must be strictly increasing".into()));
    }
    let prepared = prepare(ens, term, basis)?;
    let solutions =
        levels.iter().map(|n| solve_prepared(ens, &prepared, driver, *n, basis, opts)).collect::<Result<Vec<_>>>()?;
    let grid = &ens.grid;
    let certified = grid.nearest_index(grid.horizon() - eps).min(grid.steps());
    let certified_until = grid.time(certified);
    let comparisons: Vec<PairComparison<S>> =
        solutions.windows(2).map(|w| compare_levels(&w[0], &w[1], certified)).collect();
    let mut warnings = Vec::new();
    for c in &comparisons {
        if c.violating_fraction > lit(0.01) {
            warnings.push(format!(
                "levels {} -> {}: {:.3}% of nodes decrease beyond 3 SE, worst {} at path {} step {}",
                c.lower,
                c.upper,
                to_f64(c.violating_fraction) * 100.0,
                c.worst_excess,
                c.worst_node.0,
                c.worst_node.1
            ));
        }
    }
    let means: Vec<S> = solutions.iter().map(|s| s.column(0).into_iter().sum::<S>() / count(s.n_paths)).collect();
    let increments: Vec<S> = means.windows(2).map(|w| w[1] - w[0]).collect();
    let increment_ratio = if increments.len() >= 2 {
        let (a, b) = (increments[increments.len() - 2], increments[increments.len() - 1]);
        (a != S::zero()).then(|| b / a)
    } else {
        None
    };
    Ok(Ladder {
        levels: levels.to_vec(),
        solutions,
        comparisons,
        increments,
        increment_ratio,
        certified_until,
        prepared,
        warnings,
    })
}

/// Backward integration of `Y' = -f(t, Y, 0)` from `Y(T) = terminal` on the
/// grid nodes, for drivers that do not depend on `z` or the path.
///
/// With an absorption exponent the equation is integrated for
/// `u = Y^{-q}`, which stays bounded up to the horizon even for an infinite
/// terminal value; the toy driver uses its closed form.
pub fn deterministic_ode_solve<S: Scalar>(driver: &DriverSpec<S>, terminal: S, grid: &TimeGrid<S>) -> Result<Vec<S>> {
    if !driver.z_free {
        return Err(Error::InvalidParameter(format!("driver {} depends on z", driver.name)));
    }
    if terminal < S::zero() || terminal.is_nan() {
        return Err(Error::InvalidParameter("terminal value must be nonnegative".into()));
    }
    let horizon = grid.horizon();
    let n = grid.steps();
    let ctx = DriverContext::none();
    let f = |t: S, y: S| (driver.f)(t, y, &[], &ctx);
    if let (DriverKind::Toy, Some(q)) = (&driver.kind, driver.q) {
        return Ok(grid
            .points()
            .iter()
            .map(|t| {
                let tau = horizon - *t;
                if terminal.is_infinite() {
                    (q * tau).powf(-S::one() / q)
                } else if terminal == S::zero() {
                    S::zero()
                } else {
                    terminal * (S::one() + q * terminal.powf(q) * tau).powf(-S::one() / q)
                }
            })
            .collect());
    }
    let substeps = 32usize;
    let six: S = lit(6.0);
    let half: S = lit(0.5);
    let mut out = vec![S::zero(); n + 1];
    match driver.q {
        Some(q) if terminal > S::zero() => {
            let a = driver.a.clone();
            // du/dtau with u = y^{-q}; at u = 0 the absorption term dominates.
            let rhs = |t: S, u: S| -> S {
                if u <= S::zero() {
                    return q * a.as_ref().map_or(S::one(), |a| a(t));
                }
                let y = u.powf(-S::one() / q);
                -q * u * f(t, y) / y
            };
            let mut u = if terminal.is_infinite() { S::zero() } else { terminal.powf(-q) };
            out[n] = terminal;
            for j in (0..n).rev() {
                let h = grid.dt(j) / count(substeps);
                let mut t = grid.time(j + 1);
                for _ in 0..substeps {
                    let k1 = rhs(t, u);
                    let k2 = rhs(t - half * h, u + half * h * k1);
                    let k3 = rhs(t - half * h, u + half * h * k2);
                    let k4 = rhs(t - h, u + h * k3);
                    u = u + h * (k1 + lit::<S>(2.0) * k2 + lit::<S>(2.0) * k3 + k4) / six;
                    t = t - h;
                    if !(u > S::zero()) || !u.is_finite() {
                        return Err(Error::Stiffness {
                            t: to_f64(t),
                            reason: format!("transformed state left (0, inf): {u}"),
                        });
                    }
                }
                out[j] = u.powf(-S::one() / q);
            }
        }
        _ => {
            if terminal.is_infinite() {
                return Err(Error::InvalidParameter(format!(
                    "driver {} cannot absorb an infinite terminal value",
                    driver.name
                )));
            }
            let mut y = terminal;
            out[n] = y;
            for j in (0..n).rev() {
                let h = grid.dt(j) / count(substeps);
                let mut t = grid.time(j + 1);
                for _ in 0..substeps {
                    let k1 = f(t, y);
                    let k2 = f(t - half * h, y + half * h * k1);
                    let k3 = f(t - half * h, y + half * h * k2);
                    let k4 = f(t - h, y + h * k3);
                    y = y + h * (k1 + lit::<S>(2.0) * k2 + lit::<S>(2.0) * k3 + k4) / six;
                    t = t - h;
                    if !y.is_finite() {
                        return Err(Error::Stiffness { t: to_f64(t), reason: "solution blew up".into() });
                    }
                }
                out[j] = y;
            }
        }
    }
    Ok(out)
}
