//! Least-squares approximation of conditional expectations by polynomials
//! in path features, optionally piecewise over quantile cells of the first
//! feature.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{count, lit, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    /// Coordinate `i` of `X(t)`.
    State(usize),
    /// `F(t, X_t, A_t)` of the terminal functional.
    Functional,
    /// `int_0^t X_i(s) ds`.
    RunningIntegral(usize),
    /// `max_{s <= t} X_i(s)`.
    RunningMax(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionBasis<S> {
    pub features: Vec<Feature>,
    pub degree: usize,
    pub ridge: S,
    /// Number of equal-count cells along the first feature; 1 is a global fit.
    pub partitions: usize,
    /// Keep fitted values inside the range of the regressand in each cell.
    pub clip: bool,
}

impl<S: Scalar> RegressionBasis<S> {
    /// Cubic polynomials in the state and the terminal functional, fitted
    /// separately on eight cells.
    pub fn standard(dim: usize) -> Self {
        let mut features: Vec<Feature> = (0..dim).map(Feature::State).collect();
        features.push(Feature::Functional);
        Self { features, degree: 3, ridge: lit(1e-8), partitions: 8, clip: true }
    }

    pub fn with_partitions(mut self, partitions: usize) -> Self {
        self.partitions = partitions.max(1);
        self
    }
}

/// Fitted values and per-node standard errors, both `n x m` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Regression<S> {
    pub fitted: Vec<S>,
    pub stderr: Vec<S>,
    /// Root mean square residual per target column over all cells.
    pub residual_rms: Vec<S>,
}

/// Exponent vectors of total degree at most `degree`, constant term first.
fn monomials(k: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; k]];
    if k == 0 {
        return out;
    }
    for total in 1..=degree {
        let mut cur = vec![0; k];
        fill(&mut out, &mut cur, 0, total);
    }
    out
}

fn fill(out: &mut Vec<Vec<usize>>, cur: &mut Vec<usize>, pos: usize, left: usize) {
    if pos + 1 == cur.len() {
        cur[pos] = left;
        out.push(cur.clone());
        return;
    }
    for e in (0..=left).rev() {
        cur[pos] = e;
        fill(out, cur, pos + 1, left - e);
    }
    cur[pos] = 0;
}

/// In-place Cholesky of a symmetric positive definite `p x p` matrix.
fn cholesky<S: Scalar>(a: &mut [S], p: usize) -> bool {
    for j in 0..p {
        let orig = a[j * p + j];
        let mut d = orig;
        for k in 0..j {
            d = d - a[j * p + k] * a[j * p + k];
        }
        if !(d > orig * lit(1e-13)) {
            return false;
        }
        let d = d.sqrt();
        a[j * p + j] = d;
        for i in j + 1..p {
            let mut s = a[i * p + j];
            for k in 0..j {
                s = s - a[i * p + k] * a[j * p + k];
            }
            a[i * p + j] = s / d;
        }
    }
    true
}

fn cholesky_solve<S: Scalar>(l: &[S], p: usize, b: &mut [S]) {
    for i in 0..p {
        let mut s = b[i];
        for k in 0..i {
            s = s - l[i * p + k] * b[k];
        }
        b[i] = s / l[i * p + i];
    }
    for i in (0..p).rev() {
        let mut s = b[i];
        for k in i + 1..p {
            s = s - l[k * p + i] * b[k];
        }
        b[i] = s / l[i * p + i];
    }
}

/// Standardized columns of `x` restricted to `rows`, dropping constant and
/// duplicated columns.
fn standardized<S: Scalar>(x: &[S], k: usize, rows: &[usize]) -> (Vec<S>, usize) {
    let n = rows.len();
    let nf: S = count(n);
    let mut cols: Vec<Vec<S>> = Vec::new();
    for c in 0..k {
        let mean = rows.iter().map(|r| x[r * k + c]).sum::<S>() / nf;
        let var = rows.iter().map(|r| (x[r * k + c] - mean).powi(2)).sum::<S>() / nf;
        let scale = rows.iter().fold(S::zero(), |m, r| m.max(x[r * k + c].abs()));
        if !(var.sqrt() > lit::<S>(1e-12) * (S::one() + scale)) {
            continue;
        }
        let sd = var.sqrt();
        let col: Vec<S> = rows.iter().map(|r| (x[r * k + c] - mean) / sd).collect();
        let duplicate = cols.iter().any(|other| {
            let corr = other.iter().zip(&col).map(|(a, b)| *a * *b).sum::<S>() / nf;
            corr.abs() > S::one() - lit(1e-10)
        });
        if !duplicate {
            cols.push(col);
        }
    }
    let kk = cols.len();
    let mut flat = vec![S::zero(); n * kk];
    for (c, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            flat[i * kk + c] = *v;
        }
    }
    (flat, kk)
}

struct CellFit<S> {
    rows: Vec<usize>,
    fitted: Vec<S>,
    stderr: Vec<S>,
    sse: Vec<S>,
}

fn fit_cell<S: Scalar>(
    x: &[S],
    k: usize,
    y: &[S],
    m: usize,
    rows: Vec<usize>,
    basis: &RegressionBasis<S>,
    step: usize,
) -> Result<CellFit<S>> {
    let (degree, ridge) = (basis.degree, basis.ridge);
    let n = rows.len();
    let nf: S = count(n);
    let (z, kk) = standardized(x, k, &rows);
    let terms = monomials(kk, degree);
    let p = terms.len().min(n.max(1));
    let terms = &terms[..p];
    let mut design = vec![S::one(); n * p];
    for i in 0..n {
        for (c, e) in terms.iter().enumerate() {
            let mut v = S::one();
            for (f, pow) in e.iter().enumerate() {
                if *pow > 0 {
                    v = v * z[i * kk + f].powi(*pow as i32);
                }
            }
            design[i * p + c] = v;
        }
    }
    let mut gram = vec![S::zero(); p * p];
    for i in 0..n {
        let row = &design[i * p..(i + 1) * p];
        for a in 0..p {
            for b in 0..=a {
                gram[a * p + b] = gram[a * p + b] + row[a] * row[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            gram[b * p + a] = gram[a * p + b];
        }
        if a > 0 {
            gram[a * p + a] = gram[a * p + a] + ridge * nf;
        }
    }
    let factored = cholesky(&mut gram, p);
    let mut fitted = vec![S::zero(); n * m];
    let mut stderr = vec![S::zero(); n * m];
    let mut sse = vec![S::zero(); m];
    for col in 0..m {
        let (lo, hi) = rows.iter().fold((S::infinity(), S::neg_infinity()), |(lo, hi), r| {
            let v = y[r * m + col];
            (lo.min(v), hi.max(v))
        });
        if lo == hi {
            for i in 0..n {
                fitted[i * m + col] = lo;
            }
            continue;
        }
        if !factored {
            return Err(Error::RankDeficient { step });
        }
        let mut rhs = vec![S::zero(); p];
        for (i, r) in rows.iter().enumerate() {
            let t = y[r * m + col];
            for a in 0..p {
                rhs[a] = rhs[a] + design[i * p + a] * t;
            }
        }
        cholesky_solve(&gram, p, &mut rhs);
        let mut s = S::zero();
        for (i, r) in rows.iter().enumerate() {
            let mut v = S::zero();
            for a in 0..p {
                v = v + design[i * p + a] * rhs[a];
            }
            let v = if basis.clip { v.max(lo).min(hi) } else { v };
            fitted[i * m + col] = v;
            let e = y[r * m + col] - v;
            s = s + e * e;
        }
        sse[col] = s;
        let se = (s / nf).sqrt() * (count::<S>(p) / nf).sqrt();
        for i in 0..n {
            stderr[i * m + col] = se;
        }
    }
    Ok(CellFit { rows, fitted, stderr, sse })
}

/// Regresses the `m` columns of `y` (`n x m`) on polynomials of the `k`
/// features in `x` (`n x k`). `step` only labels errors.
pub fn regress<S: Scalar>(
    x: &[S],
    k: usize,
    y: &[S],
    m: usize,
    basis: &RegressionBasis<S>,
    step: usize,
) -> Result<Regression<S>> {
    let n = y.len().checked_div(m).unwrap_or(0);
    if n == 0 || x.len() != n * k {
        return Err(Error::Shape("regression inputs have inconsistent lengths".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if k > 0 && basis.partitions > 1 {
        order.sort_by(|a, b| x[a * k].partial_cmp(&x[b * k]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(b)));
    }
    let cells = if k == 0 { 1 } else { basis.partitions.max(1).min(n) };
    // Equal-count cuts, moved forward so that ties share a cell.
    let key = |i: usize| x[order[i] * k];
    let mut cuts = vec![0usize];
    for c in 1..cells {
        let mut b = (c * n / cells).max(*cuts.last().expect("nonempty"));
        while b > 0 && b < n && key(b) == key(b - 1) {
            b += 1;
        }
        if b > *cuts.last().expect("nonempty") && b < n {
            cuts.push(b);
        }
    }
    cuts.push(n);
    let bounds: Vec<(usize, usize)> = cuts.windows(2).map(|w| (w[0], w[1])).collect();
    let fits: Vec<Result<CellFit<S>>> = bounds
        .par_iter()
        .map(|(lo, hi)| {
            let rows = order[*lo..*hi].to_vec();
            fit_cell(x, k, y, m, rows, basis, step)
        })
        .collect();
    let mut fitted = vec![S::zero(); n * m];
    let mut stderr = vec![S::zero(); n * m];
    let mut sse = vec![S::zero(); m];
    for fit in fits {
        let fit = fit?;
        for (i, r) in fit.rows.iter().enumerate() {
            fitted[r * m..(r + 1) * m].copy_from_slice(&fit.fitted[i * m..(i + 1) * m]);
            stderr[r * m..(r + 1) * m].copy_from_slice(&fit.stderr[i * m..(i + 1) * m]);
        }
        for (s, e) in sse.iter_mut().zip(&fit.sse) {
            *s = *s + *e;
        }
    }
    let residual_rms = sse.into_iter().map(|s| (s / count(n)).sqrt()).collect();
    Ok(Regression { fitted, stderr, residual_rms })
}
