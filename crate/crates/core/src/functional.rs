//! Non-anticipative functionals `F(t, x_t, v_t)` of a path `x` and of the
//! density `v` of its quadratic variation, their horizontal and vertical
//! derivatives, and the discrete change-of-variable residual.
//!
//! A functional is evaluated on [`PathRef`]s, which cannot see past their
//! stop index; `v` is only read strictly before the current index, which is
//! the grid form of predictable dependence.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::paths::{DiscretePath, PathRef, StoppedPath, TimeGrid};
use crate::quadrature::gauss_legendre;
use crate::{count, lit, to_f64, Scalar};

pub type EvalFn<S> = Arc<dyn Fn(&PathRef<'_, S>, &PathRef<'_, S>) -> S + Send + Sync>;
pub type VectorFn<S> = Arc<dyn Fn(&PathRef<'_, S>, &PathRef<'_, S>) -> Vec<S> + Send + Sync>;
/// Values `F(t_j, x_{t_j}, v_{t_j})` for every grid index at once.
pub type AlongFn<S> = Arc<dyn Fn(&TimeGrid<S>, &[S], &[S], usize) -> Vec<S> + Send + Sync>;

/// Closed-form derivatives of a functional.
#[derive(Clone)]
pub struct AnalyticDerivatives<S> {
    pub horizontal: EvalFn<S>,
    pub vertical: VectorFn<S>,
    /// Row-major `d x d`.
    pub second_vertical: VectorFn<S>,
}

#[derive(Clone)]
pub struct FunctionalSpec<S> {
    pub name: String,
    pub dim: usize,
    eval: EvalFn<S>,
    along: Option<AlongFn<S>>,
    pub analytic: Option<AnalyticDerivatives<S>>,
}

impl<S> fmt::Debug for FunctionalSpec<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FunctionalSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("analytic", &self.analytic.is_some())
            .finish()
    }
}

impl<S: Scalar> FunctionalSpec<S> {
    pub fn new(name: impl Into<String>, dim: usize, eval: EvalFn<S>) -> Self {
        Self { name: name.into(), dim, eval, along: None, analytic: None }
    }

    pub fn with_analytic(mut self, d: AnalyticDerivatives<S>) -> Self {
        self.analytic = Some(d);
        self
    }

    pub fn with_along(mut self, along: AlongFn<S>) -> Self {
        self.along = Some(along);
        self
    }

    pub fn eval(&self, x: &PathRef<'_, S>, v: &PathRef<'_, S>) -> S {
        (self.eval)(x, v)
    }

    pub fn eval_stopped(&self, x: &StoppedPath<S>, v: &StoppedPath<S>) -> S {
        self.eval(&x.as_ref(), &v.as_ref())
    }

    /// `F(t_j, x_{t_j}, v_{t_j})` for `j = 0..=N`.
    pub fn values_along(&self, grid: &TimeGrid<S>, x: &[S], v: &[S]) -> Vec<S> {
        if let Some(along) = &self.along {
            return along(grid, x, v, self.dim);
        }
        let d = self.dim;
        (0..=grid.steps())
            .map(|j| {
                let xr = PathRef::new(grid, x, d, j);
                let vr = PathRef::new(grid, v, d * d, j);
                self.eval(&xr, &vr)
            })
            .collect()
    }

    /// `F(t, x, v) = h(t, x(t))` with its classical derivatives.
    pub fn markovian(
        name: impl Into<String>,
        dim: usize,
        h: Arc<dyn Fn(S, &[S]) -> S + Send + Sync>,
        grad: Arc<dyn Fn(S, &[S]) -> Vec<S> + Send + Sync>,
        dt: Arc<dyn Fn(S, &[S]) -> S + Send + Sync>,
        hess: Arc<dyn Fn(S, &[S]) -> Vec<S> + Send + Sync>,
    ) -> Self {
        let he = h.clone();
        let eval: EvalFn<S> = Arc::new(move |x, _v| he(x.time(), x.current()));
        let ha = h.clone();
        let along: AlongFn<S> = Arc::new(move |grid, xs, _vs, d| {
            (0..=grid.steps()).map(|j| ha(grid.time(j), &xs[j * d..(j + 1) * d])).collect()
        });
        let analytic = AnalyticDerivatives {
            horizontal: Arc::new(move |x, _v| dt(x.time(), x.current())),
            vertical: Arc::new(move |x, _v| grad(x.time(), x.current())),
            second_vertical: Arc::new(move |x, _v| hess(x.time(), x.current())),
        };
        Self::new(name, dim, eval).with_along(along).with_analytic(analytic)
    }

    /// `F = x_i(t)`.
    pub fn state(dim: usize, i: usize) -> Self {
        assert!(i < dim);
        Self::markovian(
            format!("state_{i}"),
            dim,
            Arc::new(move |_t, x| x[i]),
            Arc::new(move |_t, x| {
                let mut g = vec![S::zero(); x.len()];
                g[i] = S::one();
                g
            }),
            Arc::new(|_t, _x| S::zero()),
            Arc::new(|_t, x| vec![S::zero(); x.len() * x.len()]),
        )
    }

    /// `F = exp(t/2) cos(x(t))`, space-time harmonic for Brownian motion.
    pub fn cos_martingale() -> Self {
        let half: S = lit(0.5);
        Self::markovian(
            "cos_martingale",
            1,
            Arc::new(move |t, x| (half * t).exp() * x[0].cos()),
            Arc::new(move |t, x| vec![-(half * t).exp() * x[0].sin()]),
            Arc::new(move |t, x| half * (half * t).exp() * x[0].cos()),
            Arc::new(move |t, x| vec![-(half * t).exp() * x[0].cos()]),
        )
    }

    /// `F = int_0^t h(s, x(s)) Tr v(s) ds` on the piecewise constant path;
    /// the time integral over each cell uses a 3-point Gauss rule.
    pub fn qv_integral(dim: usize, h: Arc<dyn Fn(S, &[S]) -> S + Send + Sync>) -> Self {
        let (nodes, weights) = gauss_legendre::<S>(3);
        let rule = Arc::new((nodes, weights));
        let cell = {
            let h = h.clone();
            let rule = rule.clone();
            move |a: S, b: S, x: &[S]| {
                let half = (b - a) / lit(2.0);
                let mid = a + half;
                rule.0.iter().zip(&rule.1).fold(S::zero(), |acc, (z, w)| acc + *w * h(mid + half * *z, x)) * half
            }
        };
        let cell = Arc::new(cell);
        let c1 = cell.clone();
        let eval: EvalFn<S> = Arc::new(move |x, v| {
            let d = x.dim();
            let g = x.grid();
            (0..x.stop()).fold(S::zero(), |acc, j| acc + trace(v.at(j), d) * c1(g.time(j), g.time(j + 1), x.at(j)))
        });
        let c2 = cell.clone();
        let along: AlongFn<S> = Arc::new(move |grid, xs, vs, d| {
            let mut out = Vec::with_capacity(grid.steps() + 1);
            let mut acc = S::zero();
            out.push(acc);
            for j in 0..grid.steps() {
                let xj = &xs[j * d..(j + 1) * d];
                acc = acc + trace(&vs[j * d * d..(j + 1) * d * d], d) * c2(grid.time(j), grid.time(j + 1), xj);
                out.push(acc);
            }
            out
        });
        let hd = h.clone();
        let analytic = AnalyticDerivatives {
            horizontal: Arc::new(move |x, v| hd(x.time(), x.current()) * trace(v.current(), x.dim())),
            vertical: Arc::new(|x, _v| vec![S::zero(); x.dim()]),
            second_vertical: Arc::new(|x, _v| vec![S::zero(); x.dim() * x.dim()]),
        };
        Self::new("qv_integral", dim, eval).with_along(along).with_analytic(analytic)
    }

    /// `F = |x(t)|^2 - int_0^t Tr v(u) du`.
    pub fn square_minus_qv(dim: usize) -> Self {
        let eval: EvalFn<S> = Arc::new(|x, v| {
            let d = x.dim();
            norm2(x.current()) - v.integrate(|a| trace(a, d))
        });
        let along: AlongFn<S> = Arc::new(|grid, xs, vs, d| {
            let mut qv = S::zero();
            (0..=grid.steps())
                .map(|j| {
                    if j > 0 {
                        qv = qv + trace(&vs[(j - 1) * d * d..j * d * d], d) * grid.dt(j - 1);
                    }
                    norm2(&xs[j * d..(j + 1) * d]) - qv
                })
                .collect()
        });
        let two: S = lit(2.0);
        let analytic = AnalyticDerivatives {
            horizontal: Arc::new(|x: &PathRef<'_, S>, v: &PathRef<'_, S>| -trace(v.current(), x.dim())),
            vertical: Arc::new(move |x, _v| x.current().iter().map(|c| two * *c).collect()),
            second_vertical: Arc::new(move |x, _v| {
                let d = x.dim();
                let mut m = vec![S::zero(); d * d];
                for i in 0..d {
                    m[i * d + i] = two;
                }
                m
            }),
        };
        Self::new("square_minus_qv", dim, eval).with_along(along).with_analytic(analytic)
    }

    /// `F = exp(u.x(t) - 1/2 int_0^t u' v(s) u ds)` for a direction `u`.
    pub fn exp_martingale(direction: Vec<S>) -> Self {
        let dim = direction.len();
        let u = Arc::new(direction);
        let quad = {
            let u = u.clone();
            move |a: &[S]| {
                let d = u.len();
                let mut s = S::zero();
                for i in 0..d {
                    for k in 0..d {
                        s = s + u[i] * a[i * d + k] * u[k];
                    }
                }
                s
            }
        };
        let quad = Arc::new(quad);
        let half: S = lit(0.5);
        let (u1, q1) = (u.clone(), quad.clone());
        let eval: EvalFn<S> = Arc::new(move |x, v| (dot(&u1, x.current()) - half * v.integrate(|a| q1(a))).exp());
        let (u2, q2) = (u.clone(), quad.clone());
        let along: AlongFn<S> = Arc::new(move |grid, xs, vs, d| {
            let mut qv = S::zero();
            (0..=grid.steps())
                .map(|j| {
                    if j > 0 {
                        qv = qv + q2(&vs[(j - 1) * d * d..j * d * d]) * grid.dt(j - 1);
                    }
                    (dot(&u2, &xs[j * d..(j + 1) * d]) - half * qv).exp()
                })
                .collect()
        });
        let (u3, q3) = (u.clone(), quad.clone());
        let value = Arc::new(move |x: &PathRef<'_, S>, v: &PathRef<'_, S>| {
            (dot(&u3, x.current()) - half * v.integrate(|a| q3(a))).exp()
        });
        let (f1, q4) = (value.clone(), quad.clone());
        let (f2, u5) = (value.clone(), u.clone());
        let (f3, u6) = (value.clone(), u.clone());
        let analytic = AnalyticDerivatives {
            horizontal: Arc::new(move |x, v| -half * q4(v.current()) * f1(x, v)),
            vertical: Arc::new(move |x, v| {
                let f = f2(x, v);
                u5.iter().map(|ui| *ui * f).collect()
            }),
            second_vertical: Arc::new(move |x, v| {
                let f = f3(x, v);
                let d = u6.len();
                let mut m = vec![S::zero(); d * d];
                for i in 0..d {
                    for k in 0..d {
                        m[i * d + k] = u6[i] * u6[k] * f;
                    }
                }
                m
            }),
        };
        Self::new("exp_martingale", dim, eval).with_along(along).with_analytic(analytic)
    }
}

pub(crate) fn trace<S: Scalar>(a: &[S], d: usize) -> S {
    (0..d).fold(S::zero(), |s, i| s + a[i * d + i])
}

fn norm2<S: Scalar>(x: &[S]) -> S {
    x.iter().fold(S::zero(), |s, c| s + *c * *c)
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |s, (x, y)| s + *x * *y)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VerticalScheme<S> {
    /// One central difference with bump `h` times the path scale.
    Central { h: S },
    /// Central differences from `h_initial` (times the path scale) shrinking
    /// by `shrink`, combined by Richardson extrapolation in `h^2`; the entry
    /// with the smallest error estimate is returned.
    Extrapolated { h_initial: S, shrink: S, levels: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeStencil<S> {
    pub vertical: VerticalScheme<S>,
    /// Number of forward extensions (1, 2, ... grid steps) extrapolated to
    /// `h -> 0`; 1 is the plain one-step forward difference.
    pub horizontal_levels: usize,
}

impl<S: Scalar> Default for DerivativeStencil<S> {
    fn default() -> Self {
        Self { vertical: VerticalScheme::Central { h: lit(1e-5) }, horizontal_levels: 1 }
    }
}

impl<S: Scalar> DerivativeStencil<S> {
    pub fn extrapolated() -> Self {
        Self {
            vertical: VerticalScheme::Extrapolated { h_initial: lit(0.1), shrink: lit(1.4), levels: 10 },
            horizontal_levels: 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizontalDerivative<S> {
    pub numerical: S,
    pub analytic: Option<S>,
}

fn check_pair<S: Scalar>(x: &StoppedPath<S>, v: &StoppedPath<S>) -> Result<()> {
    if x.stop_index() != v.stop_index() {
        return Err(Error::Shape("x and v stopped at different times".into()));
    }
    if v.dim() != x.dim() * x.dim() {
        return Err(Error::Shape(format!("v has dimension {} for a state of dimension {}", v.dim(), x.dim())));
    }
    if x.path().grid().points() != v.path().grid().points() {
        return Err(Error::Shape("x and v on different grids".into()));
    }
    Ok(())
}

/// Polynomial extrapolation of `(h_i, d_i)` to `h = 0` (Neville).
fn extrapolate_to_zero<S: Scalar>(h: &[S], d: &[S]) -> S {
    let mut p = d.to_vec();
    let n = p.len();
    for m in 1..n {
        for i in 0..n - m {
            p[i] = (h[i + m] * p[i] - h[i] * p[i + 1]) / (h[i + m] - h[i]);
        }
    }
    p[0]
}

/// Forward difference `(F(t+h, x_t, v_t) - F(t, x_t, v_t)) / h` over flat
/// extensions, extrapolated over `horizontal_levels` grid steps.
pub fn horizontal_derivative<S: Scalar>(
    f: &FunctionalSpec<S>,
    x: &StoppedPath<S>,
    v: &StoppedPath<S>,
    stencil: &DerivativeStencil<S>,
) -> Result<HorizontalDerivative<S>> {
    check_pair(x, v)?;
    let grid = x.path().grid();
    let k = x.stop_index();
    if k >= grid.steps() {
        return Err(Error::NoForwardRoom);
    }
    let levels = stencil.horizontal_levels.max(1).min(grid.steps() - k);
    let base = f.eval_stopped(x, v);
    let xv = x.values();
    let vv = v.values();
    let mut hs = Vec::with_capacity(levels);
    let mut ds = Vec::with_capacity(levels);
    for m in 1..=levels {
        // x and v are flat after k, so moving the stop index is the flat extension.
        let xr = PathRef::new(grid, xv, x.dim(), k + m);
        let vr = PathRef::new(grid, vv, v.dim(), k + m);
        let h = grid.time(k + m) - grid.time(k);
        hs.push(h);
        ds.push((f.eval(&xr, &vr) - base) / h);
    }
    let numerical = extrapolate_to_zero(&hs, &ds);
    let analytic = f.analytic.as_ref().map(|a| (a.horizontal)(&x.as_ref(), &v.as_ref()));
    Ok(HorizontalDerivative { numerical, analytic })
}

fn path_scale<S: Scalar>(x: &StoppedPath<S>) -> S {
    let k = x.stop_index();
    let d = x.dim();
    x.values()[..(k + 1) * d].iter().fold(S::one(), |m, c| m.max(c.abs()))
}

/// Evaluates `F` on `x` bumped by `e` at and after the stop index.
fn bumped<S: Scalar>(f: &FunctionalSpec<S>, x: &StoppedPath<S>, v: &StoppedPath<S>, e: &[S]) -> Result<S> {
    let xb = crate::paths::vertical_bump(x, e);
    let val = f.eval_stopped(&xb, v);
    if !val.is_finite() {
        return Err(Error::NonFiniteDerivative { bump: e.iter().map(|c| to_f64(*c)).collect() });
    }
    Ok(val)
}

/// Richardson tableau over a shrinking step; `order_ratio` is the factor by
/// which the leading error term shrinks per level (`shrink^2`).
fn richardson<S: Scalar, G: FnMut(S) -> Result<S>>(
    mut estimate: G,
    h_initial: S,
    shrink: S,
    levels: usize,
) -> Result<S> {
    let ratio = shrink * shrink;
    let mut h = h_initial;
    let mut prev: Vec<S> = vec![estimate(h)?];
    let mut best = prev[0];
    let mut best_err = S::infinity();
    for _ in 1..levels.max(1) {
        h = h / shrink;
        let mut row = vec![estimate(h)?];
        let mut fac = ratio;
        for j in 1..=prev.len() {
            let next = (row[j - 1] * fac - prev[j - 1]) / (fac - S::one());
            fac = fac * ratio;
            let err = (next - row[j - 1]).abs().max((next - prev[j - 1]).abs());
            if err <= best_err {
                best_err = err;
                best = next;
            }
            row.push(next);
        }
        let last = prev.len();
        if (row[last] - prev[last - 1]).abs() >= lit::<S>(2.0) * best_err {
            break;
        }
        prev = row;
    }
    Ok(best)
}

/// Gradient of `e -> F(t, x_t + e 1_{[t,T]}, v_t)` at `e = 0`.
pub fn vertical_derivative<S: Scalar>(
    f: &FunctionalSpec<S>,
    x: &StoppedPath<S>,
    v: &StoppedPath<S>,
    stencil: &DerivativeStencil<S>,
) -> Result<Vec<S>> {
    check_pair(x, v)?;
    let d = x.dim();
    let scale = path_scale(x);
    let two: S = lit(2.0);
    let mut grad = Vec::with_capacity(d);
    for i in 0..d {
        let central = |h: S| -> Result<S> {
            let mut e = vec![S::zero(); d];
            e[i] = h;
            let up = bumped(f, x, v, &e)?;
            e[i] = -h;
            let down = bumped(f, x, v, &e)?;
            Ok((up - down) / (two * h))
        };
        let g = match stencil.vertical {
            VerticalScheme::Central { h } => central(h * scale)?,
            VerticalScheme::Extrapolated { h_initial, shrink, levels } => {
                richardson(central, h_initial * scale, shrink, levels)?
            }
        };
        grad.push(g);
    }
    Ok(grad)
}

/// Symmetrized Hessian of the vertical bump map, row-major `d x d`.
pub fn second_vertical_derivative<S: Scalar>(
    f: &FunctionalSpec<S>,
    x: &StoppedPath<S>,
    v: &StoppedPath<S>,
    stencil: &DerivativeStencil<S>,
) -> Result<Vec<S>> {
    check_pair(x, v)?;
    let d = x.dim();
    let scale = path_scale(x);
    let center = bumped(f, x, v, &vec![S::zero(); d])?;
    let four: S = lit(4.0);
    let mut hess = vec![S::zero(); d * d];
    for i in 0..d {
        for k in i..d {
            let stencil_at = |h: S| -> Result<S> {
                let mut e = vec![S::zero(); d];
                if i == k {
                    e[i] = h;
                    let up = bumped(f, x, v, &e)?;
                    e[i] = -h;
                    let down = bumped(f, x, v, &e)?;
                    Ok((up - center - center + down) / (h * h))
                } else {
                    let mut corner = |si: S, sk: S| -> Result<S> {
                        e.iter_mut().for_each(|c| *c = S::zero());
                        e[i] = si * h;
                        e[k] = sk * h;
                        bumped(f, x, v, &e)
                    };
                    let one = S::one();
                    let pp = corner(one, one)?;
                    let pm = corner(one, -one)?;
                    let mp = corner(-one, one)?;
                    let mm = corner(-one, -one)?;
                    Ok((pp - pm - mp + mm) / (four * h * h))
                }
            };
            let val = match stencil.vertical {
                VerticalScheme::Central { h } => stencil_at(h * scale)?,
                VerticalScheme::Extrapolated { h_initial, shrink, levels } => {
                    richardson(stencil_at, h_initial * scale, shrink, levels)?
                }
            };
            hess[i * d + k] = val;
            hess[k * d + i] = val;
        }
    }
    Ok(hess)
}

/// Derivatives at one node, analytic when the functional carries them.
struct NodeDerivatives<S> {
    horizontal: S,
    vertical: Vec<S>,
    second: Vec<S>,
}

fn node_derivatives<S: Scalar>(
    f: &FunctionalSpec<S>,
    x: &DiscretePath<S>,
    a: &DiscretePath<S>,
    j: usize,
    stencil: &DerivativeStencil<S>,
) -> Result<NodeDerivatives<S>> {
    if let Some(an) = &f.analytic {
        let xr = x.view(j);
        let ar = a.view(j);
        return Ok(NodeDerivatives {
            horizontal: (an.horizontal)(&xr, &ar),
            vertical: (an.vertical)(&xr, &ar),
            second: (an.second_vertical)(&xr, &ar),
        });
    }
    let xs = StoppedPath::at_index(x.clone(), j)?;
    let as_ = StoppedPath::at_index(a.clone(), j)?;
    let horizontal = horizontal_derivative(f, &xs, &as_, stencil)?.numerical;
    let vertical = vertical_derivative(f, &xs, &as_, stencil)?;
    let second = second_vertical_derivative(f, &xs, &as_, stencil)?;
    for c in std::iter::once(horizontal).chain(vertical.iter().copied()).chain(second.iter().copied()) {
        if !c.is_finite() {
            return Err(Error::NonFiniteDerivative { bump: vec![] });
        }
    }
    Ok(NodeDerivatives { horizontal, vertical, second })
}

fn check_xa<S: Scalar>(f: &FunctionalSpec<S>, x: &DiscretePath<S>, a: &DiscretePath<S>) -> Result<()> {
    if x.grid().points() != a.grid().points() {
        return Err(Error::Shape("X and A on different grids".into()));
    }
    if x.dim() != f.dim || a.dim() != f.dim * f.dim {
        return Err(Error::Shape(format!(
            "functional of dimension {} applied to X of dimension {} and A of dimension {}",
            f.dim,
            x.dim(),
            a.dim()
        )));
    }
    Ok(())
}

/// `F(T) - F(0) - sum DF dt - sum grad F . dX - 1/2 sum Tr(Hess F A) dt`
/// with left-point sums.
pub fn ito_residual<S: Scalar>(
    f: &FunctionalSpec<S>,
    x: &DiscretePath<S>,
    a: &DiscretePath<S>,
    stencil: &DerivativeStencil<S>,
) -> Result<S> {
    check_xa(f, x, a)?;
    let grid = x.grid();
    let n = grid.steps();
    let d = f.dim;
    let half: S = lit(0.5);
    let end = f.eval(&x.view(n), &a.view(n));
    let start = f.eval(&x.view(0), &a.view(0));
    let mut sum = S::zero();
    for j in 0..n {
        let nd = node_derivatives(f, x, a, j, stencil)?;
        let dt = grid.dt(j);
        let xj = x.at(j);
        let xn = x.at(j + 1);
        let mut drift = nd.horizontal * dt;
        for i in 0..d {
            drift = drift + nd.vertical[i] * (xn[i] - xj[i]);
        }
        let aj = a.at(j);
        let mut tr = S::zero();
        for i in 0..d {
            for k in 0..d {
                tr = tr + nd.second[i * d + k] * aj[k * d + i];
            }
        }
        sum = sum + drift + half * tr * dt;
    }
    Ok(end - start - sum)
}

/// `Theta_1(s) = DF + grad F . b + 1/2 Tr(Hess F A)` along the path.
/// `drift` holds `b(t_j, X_{t_j})` for every node, flat `(N+1) x d`.
/// Without closed-form derivatives the last node repeats the previous value.
pub fn theta1<S: Scalar>(
    f: &FunctionalSpec<S>,
    x: &DiscretePath<S>,
    a: &DiscretePath<S>,
    drift: &[S],
    stencil: &DerivativeStencil<S>,
) -> Result<DiscretePath<S>> {
    check_xa(f, x, a)?;
    let grid = x.grid();
    let n = grid.steps();
    let d = f.dim;
    if drift.len() != (n + 1) * d {
        return Err(Error::Shape("drift values do not match the grid".into()));
    }
    let half: S = lit(0.5);
    let last = if f.analytic.is_some() { n } else { n - 1 };
    let mut out = Vec::with_capacity(n + 1);
    for j in 0..=last {
        let nd = node_derivatives(f, x, a, j, stencil)?;
        let b = &drift[j * d..(j + 1) * d];
        let aj = a.at(j);
        let mut val = nd.horizontal;
        for i in 0..d {
            val = val + nd.vertical[i] * b[i];
            for k in 0..d {
                val = val + half * nd.second[i * d + k] * aj[k * d + i];
            }
        }
        if !val.is_finite() {
            return Err(Error::NonFiniteDerivative { bump: vec![] });
        }
        out.push(val);
    }
    if last < n {
        let prev = out[last];
        out.push(prev);
    }
    DiscretePath::scalar(grid.clone(), out)
}

/// Least-squares slope of `log err` against `log dt`.
pub fn refinement_order<S: Scalar>(dts: &[S], errors: &[S]) -> S {
    let n: S = count(dts.len());
    let lx: Vec<S> = dts.iter().map(|h| h.ln()).collect();
    let ly: Vec<S> = errors.iter().map(|e| e.ln()).collect();
    let mx = lx.iter().copied().sum::<S>() / n;
    let my = ly.iter().copied().sum::<S>() / n;
    let sxy = lx.iter().zip(&ly).fold(S::zero(), |s, (a, b)| s + (*a - mx) * (*b - my));
    let sxx = lx.iter().fold(S::zero(), |s, a| s + (*a - mx) * (*a - mx));
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(n: usize) -> Arc<TimeGrid<f64>> {
        Arc::new(TimeGrid::uniform(1.0, n).unwrap())
    }

    fn stopped(g: &Arc<TimeGrid<f64>>, vals: Vec<f64>, k: usize) -> StoppedPath<f64> {
        StoppedPath::at_index(DiscretePath::scalar(g.clone(), vals).unwrap(), k).unwrap()
    }

    #[test]
    fn markovian_state_has_no_time_derivative() {
        let g = grid(4);
        let f = FunctionalSpec::<f64>::state(1, 0);
        let x = stopped(&g, vec![0.0, 1.0, 3.0, 2.0, 1.0], 2);
        let v = stopped(&g, vec![1.0; 5], 2);
        let d = horizontal_derivative(&f, &x, &v, &DerivativeStencil::default()).unwrap();
        assert_eq!(d.numerical, 0.0);
        assert_eq!(d.analytic, Some(0.0));
    }

    #[test]
    fn square_minus_qv_derivatives() {
        let g = grid(8);
        let f = FunctionalSpec::<f64>::square_minus_qv(1);
        let x = stopped(&g, vec![0.0, 0.3, 1.5, 1.5, 0.0, 0.0, 0.0, 0.0, 0.0], 2);
        let v = stopped(&g, vec![1.0, 0.5, 0.8, 0.8, 0.8, 0.8, 0.8, 0.8, 0.8], 2);
        let st = DerivativeStencil::default();
        let dh = horizontal_derivative(&f, &x, &v, &st).unwrap();
        assert!((dh.numerical + 0.8).abs() < 1e-12);
        let dv = vertical_derivative(&f, &x, &v, &st).unwrap();
        assert!((dv[0] - 3.0).abs() < 1e-9);
        let d2 = second_vertical_derivative(&f, &x, &v, &st).unwrap();
        assert!((d2[0] - 2.0).abs() < 1e-4);
        let d2 = second_vertical_derivative(&f, &x, &v, &DerivativeStencil::extrapolated()).unwrap();
        assert!((d2[0] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn integral_functional_derivatives() {
        let g = grid(4);
        let f = FunctionalSpec::<f64>::qv_integral(1, Arc::new(|_s, x| x[0]));
        let x = stopped(&g, vec![1.0, 2.0, 2.0, 2.0, 2.0], 1);
        let v = stopped(&g, vec![1.0; 5], 1);
        let st = DerivativeStencil::default();
        let dh = horizontal_derivative(&f, &x, &v, &st).unwrap();
        assert!((dh.numerical - 2.0).abs() < 1e-12);
        let dv = vertical_derivative(&f, &x, &v, &st).unwrap();
        assert_eq!(dv, vec![0.0]);
    }

    #[test]
    fn sine_vertical_derivative() {
        let g = grid(4);
        let f = FunctionalSpec::<f64>::markovian(
            "sin",
            1,
            Arc::new(|_t, x| x[0].sin()),
            Arc::new(|_t, x| vec![x[0].cos()]),
            Arc::new(|_t, _x| 0.0),
            Arc::new(|_t, x| vec![-x[0].sin()]),
        );
        let x = stopped(&g, vec![0.0; 5], 3);
        let v = stopped(&g, vec![1.0; 5], 3);
        let dv = vertical_derivative(&f, &x, &v, &DerivativeStencil::default()).unwrap();
        assert!((dv[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn linear_functional_has_zero_hessian() {
        let g = grid(4);
        let f = FunctionalSpec::<f64>::state(1, 0);
        let x = stopped(&g, vec![0.0, 4.0, 4.0, 4.0, 4.0], 1);
        let v = stopped(&g, vec![1.0; 5], 1);
        let d2 = second_vertical_derivative(&f, &x, &v, &DerivativeStencil::default()).unwrap();
        assert!(d2[0].abs() < 1e-6);
    }

    #[test]
    fn exp_martingale_hessian_at_origin() {
        let g = grid(4);
        let f = FunctionalSpec::<f64>::exp_martingale(vec![1.0]);
        let x = stopped(&g, vec![0.0; 5], 0);
        let v = stopped(&g, vec![0.0; 5], 0);
        let d2 = second_vertical_derivative(&f, &x, &v, &DerivativeStencil::extrapolated()).unwrap();
        assert!((d2[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn no_forward_room_at_horizon() {
        let g = grid(4);
        let f = FunctionalSpec::<f64>::state(1, 0);
        let x = stopped(&g, vec![0.0; 5], 4);
        let v = stopped(&g, vec![0.0; 5], 4);
        assert!(matches!(horizontal_derivative(&f, &x, &v, &DerivativeStencil::default()), Err(Error::NoForwardRoom)));
    }

    #[test]
    fn non_finite_bump_is_reported() {
        let g = grid(4);
        let f = FunctionalSpec::<f64>::new("log", 1, Arc::new(|x, _v| x.current()[0].ln()));
        let x = stopped(&g, vec![0.0; 5], 2);
        let v = stopped(&g, vec![0.0; 5], 2);
        let err = vertical_derivative(&f, &x, &v, &DerivativeStencil::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteDerivative { .. }));
    }

    #[test]
    fn linear_markovian_residual_telescopes() {
        let g = grid(64);
        let vals: Vec<f64> = (0..=64).map(|j| (j as f64 * 0.37).sin() * 3.0).collect();
        let x = DiscretePath::scalar(g.clone(), vals).unwrap();
        let a = DiscretePath::constant(g, &[1.0]);
        let f = FunctionalSpec::<f64>::state(1, 0);
        let r = ito_residual(&f, &x, &a, &DerivativeStencil::default()).unwrap();
        assert!(r.abs() < 1e-12);
    }

    #[test]
    fn square_residual_is_discrete_qv_error() {
        // Oracle: F(T)-F(0)-sum 2X dX = sum (dX)^2 and the dt terms cancel,
        // leaving sum (dX)^2 - T.
        let g = grid(16);
        let vals: Vec<f64> = (0..=16).map(|j| ((j * j) as f64 * 0.1).cos()).collect();
        let x = DiscretePath::scalar(g.clone(), vals.clone()).unwrap();
        let a = DiscretePath::constant(g, &[1.0]);
        let f = FunctionalSpec::<f64>::square_minus_qv(1);
        let r = ito_residual(&f, &x, &a, &DerivativeStencil::default()).unwrap();
        let qv: f64 = vals.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
        assert!((r - (qv - 1.0)).abs() < 1e-12);
        // Without closed-form derivatives the stencil route agrees.
        let bare =
            FunctionalSpec::<f64>::new("bare", 1, Arc::new(|x, v| x.current()[0].powi(2) - v.integrate(|a| a[0])));
        let r2 = ito_residual(&bare, &x, &a, &DerivativeStencil::extrapolated()).unwrap();
        assert!((r2 - r).abs() < 1e-6);
    }

    #[test]
    fn theta1_examples() {
        let g = grid(8);
        let x = DiscretePath::scalar(g.clone(), (0..=8).map(|j| j as f64 * 0.1).collect()).unwrap();
        let a = DiscretePath::constant(g.clone(), &[1.0]);
        let zero = vec![0.0; 9];
        let st = DerivativeStencil::default();
        let t = theta1(&FunctionalSpec::state(1, 0), &x, &a, &zero, &st).unwrap();
        assert!(t.values().iter().all(|v| *v == 0.0));
        let t = theta1(&FunctionalSpec::square_minus_qv(1), &x, &a, &zero, &st).unwrap();
        assert!(t.values().iter().all(|v| v.abs() < 1e-15));
        let two = DiscretePath::constant(g, &[2.0]);
        let f = FunctionalSpec::<f64>::qv_integral(1, Arc::new(|_s, x| x[0]));
        let t = theta1(&f, &two, &a, &zero, &st).unwrap();
        assert!(t.values().iter().all(|v| (*v - 2.0).abs() < 1e-15));
    }

    #[test]
    fn along_matches_pointwise_eval() {
        let g = grid(10);
        let xs: Vec<f64> = (0..=10).map(|j| (j as f64).sin()).collect();
        let vs: Vec<f64> = (0..=10).map(|j| 1.0 + 0.1 * j as f64).collect();
        for f in [
            FunctionalSpec::<f64>::square_minus_qv(1),
            FunctionalSpec::exp_martingale(vec![0.7]),
            FunctionalSpec::qv_integral(1, Arc::new(|s, x| x[0] * s.cos())),
            FunctionalSpec::cos_martingale(),
        ] {
            let fast = f.values_along(&g, &xs, &vs);
            for (j, fv) in fast.iter().enumerate() {
                let slow = f.eval(&PathRef::new(&g, &xs, 1, j), &PathRef::new(&g, &vs, 1, j));
                assert!((fv - slow).abs() < 1e-12, "{} at {j}", f.name);
            }
        }
    }

    proptest! {
        #[test]
        fn builtins_ignore_the_future(
            xs in proptest::collection::vec(-5.0f64..5.0, 9),
            vs in proptest::collection::vec(0.0f64..3.0, 9),
            junk in proptest::collection::vec(-50.0f64..50.0, 9),
            k in 0usize..8,
        ) {
            let g = grid(8);
            for f in [
                FunctionalSpec::<f64>::square_minus_qv(1),
                FunctionalSpec::exp_martingale(vec![0.3]),
                FunctionalSpec::qv_integral(1, Arc::new(|_s, x| x[0])),
                FunctionalSpec::cos_martingale(),
            ] {
                let base = f.eval(&PathRef::new(&g, &xs, 1, k), &PathRef::new(&g, &vs, 1, k));
                let mut xs2 = xs.clone();
                let mut vs2 = vs.clone();
                for j in k + 1..9 {
                    xs2[j] = junk[j];
                    vs2[j] = junk[j].abs();
                }
                // Predictable dependence: the current v value is not read either.
                vs2[k] = junk[k].abs();
                let other = f.eval(&PathRef::new(&g, &xs2, 1, k), &PathRef::new(&g, &vs2, 1, k));
                prop_assert_eq!(base, other);
            }
        }
    }
}
