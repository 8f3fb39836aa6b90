//! Gauss-Legendre quadrature.

use crate::{count, lit, Scalar};

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[-1, 1]`.
pub fn gauss_legendre<S: Scalar>(n: usize) -> (Vec<S>, Vec<S>) {
    assert!(n >= 1);
    let mut nodes = vec![S::zero(); n];
    let mut weights = vec![S::zero(); n];
    let nf: S = count(n);
    let half = n.div_ceil(2);
    for i in 0..half {
        // Tricomi initial guess.
        let mut x = (S::PI() * (count::<S>(i) + lit(0.75)) / (nf + lit(0.5))).cos();
        let mut dp = S::one();
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x = x - dx;
            if dx.abs() <= S::epsilon() * lit(4.0) {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        dp = if d.is_finite() { d } else { dp };
        let w = lit::<S>(2.0) / ((S::one() - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre<S: Scalar>(n: usize, x: S) -> (S, S) {
    let mut p0 = S::one();
    let mut p1 = x;
    for k in 2..=n {
        let kf: S = count(k);
        let p2 = ((lit::<S>(2.0) * kf - S::one()) * x * p1 - (kf - S::one()) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let nf: S = count(n);
    let dp = nf * (x * p1 - p0) / (x * x - S::one());
    (p1, dp)
}

/// Composite Gauss-Legendre rule with `panels` panels of `order` points.
pub fn integrate<S: Scalar, F: Fn(S) -> S>(f: F, a: S, b: S, order: usize, panels: usize) -> S {
    let (x, w) = gauss_legendre::<S>(order);
    let h = (b - a) / count(panels);
    let half = h / lit(2.0);
    let mut total = S::zero();
    for k in 0..panels {
        let mid = a + h * count(k) + half;
        for (xi, wi) in x.iter().zip(&w) {
            total = total + *wi * f(mid + half * *xi);
        }
    }
    total * half
}
