//! Discretized path space: time grids, paths, stopped paths and the
//! `d_inf` distance on stopped paths.
//!
//! Paths are piecewise constant between grid points and all sup norms are
//! taken over grid points. Stopping and horizontal extension only ever land
//! on grid points; callers refine the grid instead of interpolating.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::{lit, to_f64, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Refinement<S> {
    Uniform,
    /// Steps shrink by `ratio` per step when approaching the horizon.
    GeometricNearHorizon {
        ratio: S,
    },
    /// Arbitrary user-supplied points.
    Custom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid<S> {
    points: Vec<S>,
    refinement: Refinement<S>,
}

impl<S: Scalar> TimeGrid<S> {
    pub fn uniform(horizon: S, steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 steps, got {steps}")));
        }
        if !(horizon > S::zero()) || !horizon.is_finite() {
            return Err(Error::InvalidGrid("horizon must be positive and finite".into()));
        }
        let n: S = crate::count(steps);
        let mut points: Vec<S> = (0..=steps).map(|j| horizon * crate::count(j) / n).collect();
        points[steps] = horizon;
        Ok(Self { points, refinement: Refinement::Uniform })
    }

    /// Uniform steps of at most `max_step` away from the horizon, then steps
    /// contracting by `ratio` down to `min_step` at the horizon.
    pub fn geometric(horizon: S, max_step: S, ratio: S, min_step: S) -> Result<Self> {
        if !(ratio > S::zero() && ratio < S::one()) {
            return Err(Error::InvalidGrid(format!("ratio {ratio} outside (0,1)")));
        }
        if !(min_step > S::zero() && min_step <= max_step && max_step < horizon) {
            return Err(Error::InvalidGrid("need 0 < min_step <= max_step < horizon".into()));
        }
        // Geometric tail, listed from the horizon backwards.
        let mut tail = Vec::new();
        let mut step = min_step;
        let mut total = S::zero();
        while step < max_step * ratio {
            tail.push(step);
            total = total + step;
            step = step / ratio;
        }
        loop {
            let rest = horizon - total;
            if !(rest > S::zero()) {
                return Err(Error::InvalidGrid("geometric tail longer than the horizon".into()));
            }
            let m = (rest / max_step).ceil().max(S::one());
            let uniform = rest / m;
            let largest_tail = tail.last().copied().unwrap_or(S::zero());
            if uniform >= largest_tail || tail.is_empty() {
                let m = m.to_usize().unwrap_or(1);
                let mut points = Vec::with_capacity(m + tail.len() + 1);
                for j in 0..=m {
                    points.push(rest * crate::count(j) / crate::count(m));
                }
                let mut t = rest;
                for s in tail.iter().rev() {
                    t = t + *s;
                    points.push(t);
                }
                let last = points.len() - 1;
                points[last] = horizon;
                if points.len() < 3 {
                    return Err(Error::InvalidGrid("geometric grid with fewer than 2 steps".into()));
                }
                return Ok(Self { points, refinement: Refinement::GeometricNearHorizon { ratio } });
            }
            let dropped = tail.pop().unwrap();
            total = total - dropped;
        }
    }

    pub fn from_points(points: Vec<S>) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::InvalidGrid("need at least 2 steps".into()));
        }
        if points[0] != S::zero() {
            return Err(Error::InvalidGrid("first grid point must be 0".into()));
        }
        if points.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidGrid("grid points must be strictly increasing".into()));
        }
        Ok(Self { points, refinement: Refinement::Custom })
    }

    pub fn points(&self) -> &[S] {
        &self.points
    }

    pub fn refinement(&self) -> Refinement<S> {
        self.refinement
    }

    pub fn horizon(&self) -> S {
        self.points[self.points.len() - 1]
    }

    /// Number of steps `N`; there are `N + 1` points.
    pub fn steps(&self) -> usize {
        self.points.len() - 1
    }

    pub fn time(&self, j: usize) -> S {
        self.points[j]
    }

    pub fn dt(&self, j: usize) -> S {
        self.points[j + 1] - self.points[j]
    }

    fn tolerance(&self) -> S {
        self.horizon() * lit::<S>(64.0) * S::epsilon()
    }

    /// Index of the grid point equal to `t` (up to rounding).
    pub fn index_of(&self, t: S) -> Result<usize> {
        let tol = self.tolerance();
        let j = self.nearest_index(t);
        if (self.points[j] - t).abs() <= tol {
            return Ok(j);
        }
        let above = self.points.partition_point(|p| *p < t);
        if above == 0 || above > self.steps() {
            return Err(Error::OffGrid {
                time: to_f64(t),
                below: to_f64(self.points[0]),
                above: to_f64(self.horizon()),
            });
        }
        Err(Error::OffGrid {
            time: to_f64(t),
            below: to_f64(self.points[above - 1]),
            above: to_f64(self.points[above]),
        })
    }

    pub fn nearest_index(&self, t: S) -> usize {
        let above = self.points.partition_point(|p| *p < t);
        if above == 0 {
            return 0;
        }
        if above > self.steps() {
            return self.steps();
        }
        if (self.points[above] - t) < (t - self.points[above - 1]) {
            above
        } else {
            above - 1
        }
    }
}

/// A path sampled on a grid: one `dim`-vector per grid point, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePath<S> {
    grid: Arc<TimeGrid<S>>,
    values: Vec<S>,
    dim: usize,
}

impl<S: Scalar> DiscretePath<S> {
    pub fn new(grid: Arc<TimeGrid<S>>, values: Vec<S>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("dimension must be positive".into()));
        }
        if values.len() != (grid.steps() + 1) * dim {
            return Err(Error::Shape(format!(
                "{} values for {} grid points of dimension {dim}",
                values.len(),
                grid.steps() + 1
            )));
        }
        Ok(Self { grid, values, dim })
    }

    /// Scalar path from one value per grid point.
    pub fn scalar(grid: Arc<TimeGrid<S>>, values: Vec<S>) -> Result<Self> {
        Self::new(grid, values, 1)
    }

    pub fn constant(grid: Arc<TimeGrid<S>>, value: &[S]) -> Self {
        let n = grid.steps() + 1;
        let values = value.iter().copied().cycle().take(n * value.len()).collect();
        Self { grid, values, dim: value.len() }
    }

    pub fn grid(&self) -> &Arc<TimeGrid<S>> {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn at(&self, j: usize) -> &[S] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.grid.steps() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Stops the path at index `k` without allocating.
    pub fn view(&self, k: usize) -> PathRef<'_, S> {
        PathRef::new(&self.grid, &self.values, self.dim, k)
    }
}

/// A path frozen after its stop index: the representative of `omega_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct StoppedPath<S> {
    path: DiscretePath<S>,
    stop_index: usize,
}

impl<S: Scalar> StoppedPath<S> {
    /// Freezes `path` at grid index `k`.
    pub fn at_index(mut path: DiscretePath<S>, k: usize) -> Result<Self> {
        if k > path.grid.steps() {
            return Err(Error::Shape(format!("stop index {k} beyond grid")));
        }
        let d = path.dim;
        let (head, tail) = path.values.split_at_mut((k + 1) * d);
        let frozen = &head[k * d..];
        for chunk in tail.chunks_mut(d) {
            chunk.copy_from_slice(frozen);
        }
        Ok(Self { path, stop_index: k })
    }

    pub fn path(&self) -> &DiscretePath<S> {
        &self.path
    }

    pub fn stop_index(&self) -> usize {
        self.stop_index
    }

    pub fn time(&self) -> S {
        self.path.grid.time(self.stop_index)
    }

    pub fn dim(&self) -> usize {
        self.path.dim
    }

    pub fn values(&self) -> &[S] {
        &self.path.values
    }

    /// Value at the stop time.
    pub fn current(&self) -> &[S] {
        self.path.at(self.stop_index)
    }

    pub fn as_ref(&self) -> PathRef<'_, S> {
        self.path.view(self.stop_index)
    }
}

/// Borrowed stopped path. Reads beyond the stop index return the stopped
/// value, so anything computed through it is non-anticipative.
#[derive(Debug, Clone, Copy)]
pub struct PathRef<'a, S> {
    grid: &'a TimeGrid<S>,
    values: &'a [S],
    dim: usize,
    stop: usize,
}

impl<'a, S: Scalar> PathRef<'a, S> {
    pub fn new(grid: &'a TimeGrid<S>, values: &'a [S], dim: usize, stop: usize) -> Self {
        debug_assert!(values.len() >= (stop + 1) * dim);
        Self { grid, values, dim, stop }
    }

    pub fn grid(&self) -> &'a TimeGrid<S> {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn stop(&self) -> usize {
        self.stop
    }

    pub fn time(&self) -> S {
        self.grid.time(self.stop)
    }

    pub fn at(&self, j: usize) -> &'a [S] {
        let j = j.min(self.stop);
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    pub fn current(&self) -> &'a [S] {
        self.at(self.stop)
    }

    /// Value at the previous grid index: the left limit used for
    /// predictable dependence.
    pub fn left_limit(&self) -> &'a [S] {
        self.at(self.stop.saturating_sub(1))
    }

    /// `sum_{j < stop} g(value_j) * dt_j` over the piecewise constant path.
    pub fn integrate<G: Fn(&[S]) -> S>(&self, g: G) -> S {
        (0..self.stop).fold(S::zero(), |acc, j| acc + g(self.at(j)) * self.grid.dt(j))
    }

    pub fn to_stopped(&self) -> StoppedPath<S> {
        let n = self.grid.steps() + 1;
        let mut values = Vec::with_capacity(n * self.dim);
        for j in 0..n {
            values.extend_from_slice(self.at(j));
        }
        let path = DiscretePath { grid: Arc::new(self.grid.clone()), values, dim: self.dim };
        StoppedPath { path, stop_index: self.stop }
    }
}

/// Stops `path` at time `t`, which must be a grid point.
pub fn stop_at<S: Scalar>(path: &DiscretePath<S>, t: S) -> Result<StoppedPath<S>> {
    let k = path.grid.index_of(t)?;
    StoppedPath::at_index(path.clone(), k)
}

/// `||omega_t - omega'_t'||_inf + |t - t'|` over grid points.
pub fn d_infinity<S: Scalar>(a: &StoppedPath<S>, b: &StoppedPath<S>) -> Result<S> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("dimensions {} and {}", a.dim(), b.dim())));
    }
    if !Arc::ptr_eq(&a.path.grid, &b.path.grid) && a.path.grid.points != b.path.grid.points {
        return Err(Error::Shape("paths live on different grids".into()));
    }
    let d = a.dim();
    let sup = a
        .values()
        .chunks(d)
        .zip(b.values().chunks(d))
        .map(|(u, v)| u.iter().zip(v).map(|(x, y)| (*x - *y) * (*x - *y)).fold(S::zero(), |s, x| s + x).sqrt())
        .fold(S::zero(), S::max);
    Ok(sup + (a.time() - b.time()).abs())
}

/// `x_t + e 1_{[t,T]}`: shifts the value at and after the stop index.
pub fn vertical_bump<S: Scalar>(sp: &StoppedPath<S>, e: &[S]) -> StoppedPath<S> {
    assert_eq!(e.len(), sp.dim(), "bump dimension");
    let mut out = sp.clone();
    let d = sp.dim();
    for chunk in out.path.values[sp.stop_index * d..].chunks_mut(d) {
        for (x, de) in chunk.iter_mut().zip(e) {
            *x = *x + *de;
        }
    }
    out
}

/// Flat extension of a stopped path by `h`; `t + h` must be on the grid.
pub fn horizontal_extend<S: Scalar>(sp: &StoppedPath<S>, h: S) -> Result<StoppedPath<S>> {
    let grid = &sp.path.grid;
    let target = sp.time() + h;
    if target > grid.horizon() + grid.tolerance() {
        return Err(Error::PastHorizon { target: to_f64(target), horizon: to_f64(grid.horizon()) });
    }
    let k = grid.index_of(target)?;
    if k < sp.stop_index {
        return Err(Error::InvalidParameter("horizontal steps only move forward".into()));
    }
    Ok(StoppedPath { path: sp.path.clone(), stop_index: k })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quarter_grid() -> Arc<TimeGrid<f64>> {
        Arc::new(TimeGrid::from_points(vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]).unwrap())
    }

    #[test]
    fn uniform_grid_endpoints() {
        let g = TimeGrid::<f64>::uniform(2.0, 8).unwrap();
        assert_eq!(g.points()[0], 0.0);
        assert_eq!(g.horizon(), 2.0);
        assert_eq!(g.steps(), 8);
        assert!(TimeGrid::<f64>::uniform(1.0, 1).is_err());
    }

    #[test]
    fn geometric_grid_shrinks_towards_horizon() {
        let g = TimeGrid::<f64>::geometric(1.0, 1e-2, 0.85, 1e-6).unwrap();
        let p = g.points();
        assert_eq!(p[0], 0.0);
        assert_eq!(*p.last().unwrap(), 1.0);
        let steps: Vec<f64> = p.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(steps.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9)));
        assert!((steps.last().unwrap() - 1e-6).abs() < 1e-12);
        assert!(steps[0] <= 1e-2 + 1e-15);
    }

    #[test]
    fn off_grid_time_reports_brackets() {
        let g = quarter_grid();
        match g.index_of(0.5) {
            Err(Error::OffGrid { below, above, .. }) => {
                assert!((below - 1.0 / 3.0).abs() < 1e-15);
                assert!((above - 2.0 / 3.0).abs() < 1e-15);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn stop_constant_path_is_fixed_point() {
        let g = quarter_grid();
        let p = DiscretePath::constant(g.clone(), &[2.5]);
        let sp = stop_at(&p, g.time(2)).unwrap();
        assert_eq!(sp.values(), p.values());
        assert_eq!(sp.stop_index(), 2);
    }

    #[test]
    fn stop_freezes_tail() {
        let g = quarter_grid();
        let p = DiscretePath::scalar(g.clone(), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let sp = stop_at(&p, g.time(1)).unwrap();
        assert_eq!(sp.values(), &[0.0, 1.0, 1.0, 1.0]);
        assert_eq!(sp.stop_index(), 1);
    }

    #[test]
    fn distance_examples() {
        let g = Arc::new(TimeGrid::<f64>::uniform(1.0, 4).unwrap());
        let zero = DiscretePath::constant(g.clone(), &[0.0]);
        let a = stop_at(&zero, 0.5).unwrap();
        let b = stop_at(&zero, 0.75).unwrap();
        assert_eq!(d_infinity(&a, &a).unwrap(), 0.0);
        assert!((d_infinity(&a, &b).unwrap() - 0.25).abs() < 1e-15);

        let g = quarter_grid();
        let a = DiscretePath::scalar(g.clone(), vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let b = DiscretePath::scalar(g.clone(), vec![1.0, 2.0, 1.0, 1.0]).unwrap();
        let a = stop_at(&a, 1.0).unwrap();
        let b = stop_at(&b, 1.0).unwrap();
        assert_eq!(d_infinity(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn distance_rejects_mismatched_dims() {
        let g = quarter_grid();
        let a = StoppedPath::at_index(DiscretePath::constant(g.clone(), &[0.0]), 1).unwrap();
        let b = StoppedPath::at_index(DiscretePath::constant(g, &[0.0, 0.0]), 1).unwrap();
        assert!(d_infinity(&a, &b).is_err());
    }

    #[test]
    fn bump_example() {
        let g = quarter_grid();
        let p = DiscretePath::scalar(g, vec![0.0, 1.0, 1.0, 1.0]).unwrap();
        let sp = StoppedPath::at_index(p, 1).unwrap();
        assert_eq!(vertical_bump(&sp, &[0.0]), sp);
        assert_eq!(vertical_bump(&sp, &[0.5]).values(), &[0.0, 1.5, 1.5, 1.5]);
    }

    #[test]
    fn extension_examples() {
        let g = quarter_grid();
        let p = DiscretePath::scalar(g.clone(), vec![0.0, 1.0, 5.0, 7.0]).unwrap();
        let sp = StoppedPath::at_index(p, 1).unwrap();
        assert_eq!(horizontal_extend(&sp, 0.0).unwrap(), sp);
        let ext = horizontal_extend(&sp, g.dt(1)).unwrap();
        assert_eq!(ext.stop_index(), 2);
        assert_eq!(ext.values(), &[0.0, 1.0, 1.0, 1.0]);
        assert!(matches!(horizontal_extend(&sp, 1.0), Err(Error::PastHorizon { .. })));
        assert!(matches!(horizontal_extend(&sp, 0.1), Err(Error::OffGrid { .. })));
    }

    #[test]
    fn path_ref_is_non_anticipative() {
        let g = quarter_grid();
        let p = DiscretePath::scalar(g, vec![0.0, 1.0, 5.0, 7.0]).unwrap();
        let r = p.view(1);
        assert_eq!(r.at(3), &[1.0]);
        assert_eq!(r.left_limit(), &[0.0]);
    }

    fn random_path() -> impl Strategy<Value = (Vec<f64>, usize, usize)> {
        (3usize..12).prop_flat_map(|n| (proptest::collection::vec(-10.0f64..10.0, n + 1), 0..=n, 0..=n))
    }

    proptest! {
        #[test]
        fn stopping_is_idempotent((vals, s, t) in random_path()) {
            let n = vals.len() - 1;
            let g = Arc::new(TimeGrid::<f64>::uniform(1.0, n).unwrap());
            let p = DiscretePath::scalar(g.clone(), vals).unwrap();
            let (s, t) = (s.min(t), s.max(t));
            let once = stop_at(&p, g.time(s)).unwrap();
            let twice = stop_at(once.path(), g.time(t)).unwrap();
            prop_assert_eq!(twice.values(), once.values());
        }

        #[test]
        fn bump_is_invertible((vals, s, _t) in random_path(), e in -5.0f64..5.0) {
            let n = vals.len() - 1;
            let g = Arc::new(TimeGrid::<f64>::uniform(1.0, n).unwrap());
            let sp = StoppedPath::at_index(DiscretePath::scalar(g, vals).unwrap(), s).unwrap();
            let back = vertical_bump(&vertical_bump(&sp, &[e]), &[-e]);
            for (a, b) in back.values().iter().zip(sp.values()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            prop_assert_eq!(d_infinity(&sp, &sp).unwrap(), 0.0);
        }

        #[test]
        fn extension_is_a_semigroup((vals, s, _t) in random_path(), a in 0usize..4, b in 0usize..4) {
            let n = vals.len() - 1;
            prop_assume!(s + a + b <= n);
            let g = Arc::new(TimeGrid::<f64>::uniform(1.0, n).unwrap());
            let sp = StoppedPath::at_index(DiscretePath::scalar(g.clone(), vals).unwrap(), s).unwrap();
            let ha = g.time(s + a) - g.time(s);
            let hb = g.time(s + a + b) - g.time(s + a);
            let hab = g.time(s + a + b) - g.time(s);
            let two = horizontal_extend(&horizontal_extend(&sp, ha).unwrap(), hb).unwrap();
            let one = horizontal_extend(&sp, hab).unwrap();
            prop_assert_eq!(two.stop_index(), one.stop_index());
            prop_assert_eq!(two.values(), one.values());
        }
    }
}
