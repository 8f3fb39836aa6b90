//! Euler simulation of path-dependent SDEs
//! `X(t) = zeta(t) + int_0^t b(s, X_s) ds + int_0^t sigma(s, X_s) dW(s)`.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::noise::{brownian_increments, CounterNoise};
use crate::paths::{DiscretePath, PathRef, TimeGrid};
use crate::{count, lit, to_f64, Scalar};

/// Running functionals of the path up to the current node, maintained
/// incrementally so path-dependent coefficients stay `O(1)` per step.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<S> {
    pub max: Vec<S>,
    pub min: Vec<S>,
    /// `sum_{i < j} x_i dt_i`.
    pub integral: Vec<S>,
}

impl<S: Scalar> RunningStats<S> {
    fn start(x0: &[S]) -> Self {
        Self { max: x0.to_vec(), min: x0.to_vec(), integral: vec![S::zero(); x0.len()] }
    }

    fn advance(&mut self, prev: &[S], dt: S, next: &[S]) {
        for i in 0..next.len() {
            self.max[i] = self.max[i].max(next[i]);
            self.min[i] = self.min[i].min(next[i]);
            self.integral[i] = self.integral[i] + prev[i] * dt;
        }
    }
}

/// Writes the coefficient at `(t, x_t)` into the output slice.
pub type CoefFn<S> = Arc<dyn Fn(S, &PathRef<'_, S>, &RunningStats<S>, &mut [S]) + Send + Sync>;

#[derive(Clone)]
pub enum Initial<S> {
    Constant(Vec<S>),
    /// Deterministic `zeta(t)`; its increments enter every Euler step.
    Path(Arc<dyn Fn(S) -> Vec<S> + Send + Sync>),
}

#[derive(Clone)]
pub struct SdeModel<S> {
    pub name: String,
    pub dim: usize,
    pub drift: CoefFn<S>,
    /// Row-major `d x d`.
    pub vol: CoefFn<S>,
    pub initial: Initial<S>,
    pub lipschitz_hint: Option<S>,
}

impl<S> fmt::Debug for SdeModel<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeModel").field("name", &self.name).field("dim", &self.dim).finish()
    }
}

impl<S: Scalar> SdeModel<S> {
    fn zeta(&self, t: S) -> Vec<S> {
        match &self.initial {
            Initial::Constant(x) => x.clone(),
            Initial::Path(z) => z(t),
        }
    }

    /// `dX = mu dt + sigma dW` with `sigma` a multiple of the identity.
    pub fn drifted_brownian(x0: Vec<S>, mu: Vec<S>, sigma: S) -> Self {
        let dim = x0.len();
        assert_eq!(mu.len(), dim);
        Self {
            name: "drifted_brownian".into(),
            dim,
            drift: Arc::new(move |_t, _x, _s, out| out.copy_from_slice(&mu)),
            vol: Arc::new(move |_t, x, _s, out| diagonal(out, x.dim(), sigma)),
            initial: Initial::Constant(x0),
            lipschitz_hint: Some(S::zero()),
        }
    }

    pub fn brownian(dim: usize) -> Self {
        let mut m = Self::drifted_brownian(vec![S::zero(); dim], vec![S::zero(); dim], S::one());
        m.name = "brownian".into();
        m
    }

    /// `dX = kappa (theta - X) dt + sigma dW`, componentwise.
    pub fn ornstein_uhlenbeck(x0: Vec<S>, kappa: S, theta: S, sigma: S) -> Self {
        Self {
            name: "ornstein_uhlenbeck".into(),
            dim: x0.len(),
            drift: Arc::new(move |_t, x, _s, out| {
                for (o, xi) in out.iter_mut().zip(x.current()) {
                    *o = kappa * (theta - *xi);
                }
            }),
            vol: Arc::new(move |_t, x, _s, out| diagonal(out, x.dim(), sigma)),
            initial: Initial::Constant(x0),
            lipschitz_hint: Some(kappa.abs()),
        }
    }

    /// `dX = -kappa sup_{u <= t} X(u) dt + sigma dW`, componentwise.
    pub fn running_max_reverting(x0: Vec<S>, kappa: S, sigma: S) -> Self {
        Self {
            name: "running_max_reverting".into(),
            dim: x0.len(),
            drift: Arc::new(move |_t, _x, stats, out| {
                for (o, m) in out.iter_mut().zip(&stats.max) {
                    *o = -kappa * *m;
                }
            }),
            vol: Arc::new(move |_t, x, _s, out| diagonal(out, x.dim(), sigma)),
            initial: Initial::Constant(x0),
            lipschitz_hint: Some(kappa.abs()),
        }
    }

    /// `dX = mu X dt + sigma X dW`, componentwise.
    pub fn geometric(x0: Vec<S>, mu: S, sigma: S) -> Self {
        Self {
            name: "geometric".into(),
            dim: x0.len(),
            drift: Arc::new(move |_t, x, _s, out| {
                for (o, xi) in out.iter_mut().zip(x.current()) {
                    *o = mu * *xi;
                }
            }),
            vol: Arc::new(move |_t, x, _s, out| {
                let d = x.dim();
                out.iter_mut().for_each(|o| *o = S::zero());
                for i in 0..d {
                    out[i * d + i] = sigma * x.current()[i];
                }
            }),
            initial: Initial::Constant(x0),
            lipschitz_hint: Some(mu.abs() + sigma.abs()),
        }
    }
}

fn diagonal<S: Scalar>(out: &mut [S], d: usize, s: S) {
    out.iter_mut().for_each(|o| *o = S::zero());
    for i in 0..d {
        out[i * d + i] = s;
    }
}

/// Simulated paths with their Brownian increments and quadratic-variation
/// densities `A = sigma sigma'`, stored path-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble<S> {
    pub grid: Arc<TimeGrid<S>>,
    pub dim: usize,
    pub n_paths: usize,
    pub seed: u64,
    x: Vec<S>,
    dw: Vec<S>,
    a: Vec<S>,
}

impl<S: Scalar> Ensemble<S> {
    /// Assembles an ensemble from flat arrays; `dw` may be empty when the
    /// increments are not known (e.g. after loading from disk).
    pub fn from_parts(grid: Arc<TimeGrid<S>>, dim: usize, seed: u64, x: Vec<S>, dw: Vec<S>, a: Vec<S>) -> Result<Self> {
        let nodes = grid.steps() + 1;
        if dim == 0 || !x.len().is_multiple_of(nodes * dim) {
            return Err(Error::Shape("state array does not match the grid".into()));
        }
        let n_paths = x.len() / (nodes * dim);
        if a.len() != n_paths * nodes * dim * dim {
            return Err(Error::Shape("A array does not match the states".into()));
        }
        if !dw.is_empty() && dw.len() != n_paths * grid.steps() * dim {
            return Err(Error::Shape("increment array does not match the states".into()));
        }
        Ok(Self { grid, dim, n_paths, seed, x, dw, a })
    }

    pub fn nodes(&self) -> usize {
        self.grid.steps() + 1
    }

    pub fn x(&self, path: usize) -> &[S] {
        let w = self.nodes() * self.dim;
        &self.x[path * w..(path + 1) * w]
    }

    pub fn x_at(&self, path: usize, j: usize) -> &[S] {
        &self.x(path)[j * self.dim..(j + 1) * self.dim]
    }

    pub fn a(&self, path: usize) -> &[S] {
        let w = self.nodes() * self.dim * self.dim;
        &self.a[path * w..(path + 1) * w]
    }

    pub fn a_at(&self, path: usize, j: usize) -> &[S] {
        let dd = self.dim * self.dim;
        &self.a(path)[j * dd..(j + 1) * dd]
    }

    pub fn has_increments(&self) -> bool {
        !self.dw.is_empty()
    }

    pub fn dw(&self, path: usize) -> &[S] {
        let w = self.grid.steps() * self.dim;
        &self.dw[path * w..(path + 1) * w]
    }

    pub fn dw_at(&self, path: usize, j: usize) -> &[S] {
        &self.dw(path)[j * self.dim..(j + 1) * self.dim]
    }

    pub fn all_x(&self) -> &[S] {
        &self.x
    }

    pub fn all_a(&self) -> &[S] {
        &self.a
    }

    pub fn all_dw(&self) -> &[S] {
        &self.dw
    }

    pub fn path(&self, i: usize) -> DiscretePath<S> {
        DiscretePath::new(self.grid.clone(), self.x(i).to_vec(), self.dim).expect("shape checked")
    }

    pub fn qv_path(&self, i: usize) -> DiscretePath<S> {
        DiscretePath::new(self.grid.clone(), self.a(i).to_vec(), self.dim * self.dim).expect("shape checked")
    }
}

/// Euler scheme with increments from the counter-based generator keyed by
/// `seed`; the result does not depend on the number of worker threads.
pub fn euler_simulate<S: Scalar>(
    model: &SdeModel<S>,
    grid: Arc<TimeGrid<S>>,
    n_paths: usize,
    seed: u64,
) -> Result<Ensemble<S>> {
    if n_paths == 0 {
        return Err(Error::InvalidParameter("n_paths must be at least 1".into()));
    }
    let noise = CounterNoise::new(seed);
    let dts: Vec<S> = (0..grid.steps()).map(|j| grid.dt(j)).collect();
    let d = model.dim;
    let per_path: Vec<Result<(Vec<S>, Vec<S>, Vec<S>)>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let dw = brownian_increments(&noise, &dts, p, d);
            let (x, a) = euler_path(model, &grid, &dw, p)?;
            Ok((x, a, dw))
        })
        .collect();
    assemble(grid, d, seed, per_path)
}

/// Euler scheme driven by given increments, flat `n_paths x N x d`.
pub fn euler_simulate_from_increments<S: Scalar>(
    model: &SdeModel<S>,
    grid: Arc<TimeGrid<S>>,
    dw: &[S],
    seed: u64,
) -> Result<Ensemble<S>> {
    let d = model.dim;
    let w = grid.steps() * d;
    if w == 0 || !dw.len().is_multiple_of(w) || dw.is_empty() {
        return Err(Error::Shape("increments do not match the grid".into()));
    }
    let per_path: Vec<Result<(Vec<S>, Vec<S>, Vec<S>)>> = dw
        .par_chunks(w)
        .enumerate()
        .map(|(p, inc)| {
            let (x, a) = euler_path(model, &grid, inc, p)?;
            Ok((x, a, inc.to_vec()))
        })
        .collect();
    assemble(grid, d, seed, per_path)
}

fn assemble<S: Scalar>(
    grid: Arc<TimeGrid<S>>,
    d: usize,
    seed: u64,
    per_path: Vec<Result<(Vec<S>, Vec<S>, Vec<S>)>>,
) -> Result<Ensemble<S>> {
    let n = per_path.len();
    let nodes = grid.steps() + 1;
    let mut x = Vec::with_capacity(n * nodes * d);
    let mut a = Vec::with_capacity(n * nodes * d * d);
    let mut dw = Vec::with_capacity(n * grid.steps() * d);
    for r in per_path {
        let (px, pa, pdw) = r?;
        x.extend(px);
        a.extend(pa);
        dw.extend(pdw);
    }
    Ensemble::from_parts(grid, d, seed, x, dw, a)
}

fn euler_path<S: Scalar>(model: &SdeModel<S>, grid: &TimeGrid<S>, dw: &[S], path: usize) -> Result<(Vec<S>, Vec<S>)> {
    let d = model.dim;
    let n = grid.steps();
    let mut x = Vec::with_capacity((n + 1) * d);
    let mut a = Vec::with_capacity((n + 1) * d * d);
    let mut zeta_prev = model.zeta(S::zero());
    if zeta_prev.len() != d {
        return Err(Error::Shape(format!(
            "initial value of dimension {} for a model of dimension {d}",
            zeta_prev.len()
        )));
    }
    x.extend_from_slice(&zeta_prev);
    let mut stats = RunningStats::start(&zeta_prev);
    let mut b = vec![S::zero(); d];
    let mut sig = vec![S::zero(); d * d];
    let mut next = vec![S::zero(); d];
    for j in 0..=n {
        let t = grid.time(j);
        let view = PathRef::new(grid, &x, d, j);
        (model.vol)(t, &view, &stats, &mut sig);
        if sig.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFiniteCoefficient { what: "volatility", path, time: to_f64(t) });
        }
        for i in 0..d {
            for k in 0..d {
                let mut s = S::zero();
                for m in 0..d {
                    s = s + sig[i * d + m] * sig[k * d + m];
                }
                a.push(s);
            }
        }
        if j == n {
            break;
        }
        (model.drift)(t, &view, &stats, &mut b);
        if b.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFiniteCoefficient { what: "drift", path, time: to_f64(t) });
        }
        let dt = grid.dt(j);
        let zeta_next = match &model.initial {
            Initial::Constant(_) => zeta_prev.clone(),
            Initial::Path(z) => z(grid.time(j + 1)),
        };
        let inc = &dw[j * d..(j + 1) * d];
        let cur = &x[j * d..(j + 1) * d];
        for i in 0..d {
            let mut v = cur[i] + (zeta_next[i] - zeta_prev[i]) + b[i] * dt;
            for m in 0..d {
                v = v + sig[i * d + m] * inc[m];
            }
            next[i] = v;
        }
        if next.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFiniteCoefficient { what: "state", path, time: to_f64(grid.time(j + 1)) });
        }
        stats.advance(cur, dt, &next);
        x.extend_from_slice(&next);
        zeta_prev = zeta_next;
    }
    Ok((x, a))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloEstimate<S> {
    pub mean: S,
    pub stderr: S,
}

/// Sample mean and standard error of i.i.d. values.
pub fn mean_and_stderr<S: Scalar>(values: &[S]) -> MonteCarloEstimate<S> {
    let n: S = count(values.len());
    let mean = values.iter().copied().sum::<S>() / n;
    if values.len() < 2 {
        return MonteCarloEstimate { mean, stderr: S::zero() };
    }
    let var = values.iter().map(|v| (*v - mean) * (*v - mean)).sum::<S>() / (n - S::one());
    MonteCarloEstimate { mean, stderr: (var / n).sqrt() }
}

/// `E[sup_t |X(t)|^rho]` over grid nodes.
pub fn estimate_sup_moment<S: Scalar>(ens: &Ensemble<S>, rho: S) -> Result<MonteCarloEstimate<S>> {
    if !(rho >= S::one()) {
        return Err(Error::InvalidParameter(format!("moment exponent {rho} below 1")));
    }
    let d = ens.dim;
    let sups: Vec<S> = (0..ens.n_paths)
        .into_par_iter()
        .map(|p| {
            ens.x(p)
                .chunks(d)
                .map(|x| x.iter().fold(S::zero(), |s, c| s + *c * *c).sqrt())
                .fold(S::zero(), S::max)
                .powf(rho)
        })
        .collect();
    Ok(mean_and_stderr(&sups))
}

/// `2 G`, twice Catalan's constant: `E[sup_{t <= 1} |W(t)|^2]` for a
/// continuously monitored standard Brownian motion.
pub fn brownian_sup_square_reference<S: Scalar>() -> S {
    lit(2.0 * 0.915_965_594_177_219)
}
