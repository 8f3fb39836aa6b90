//! Generators `f(t, y, z)` of monotone type, their truncations and sampled
//! checks of the structural conditions they are meant to satisfy.

use std::fmt;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::paths::PathRef;
use crate::quadrature::integrate;
use crate::{lit, to_f64, Scalar};

/// Optional access to the forward path at the evaluation time.
#[derive(Debug, Clone, Copy, Default)]
pub struct DriverContext<'a, S> {
    pub path: Option<PathRef<'a, S>>,
}

impl<S> DriverContext<'_, S> {
    pub fn none() -> Self {
        Self { path: None }
    }
}

pub type GeneratorFn<S> = Arc<dyn Fn(S, S, &[S], &DriverContext<'_, S>) -> S + Send + Sync>;
pub type SourceFn<S> = Arc<dyn Fn(S, &DriverContext<'_, S>) -> S + Send + Sync>;
pub type TimeFn<S> = Arc<dyn Fn(S) -> S + Send + Sync>;

#[derive(Clone)]
pub enum DriverKind<S> {
    /// `-y|y|^q`.
    Toy,
    /// `-y|y|^q / (q alpha^q) + gamma`.
    Control {
        alpha: TimeFn<S>,
        gamma: TimeFn<S>,
    },
    Zero,
    Custom,
}

#[derive(Clone)]
pub struct DriverSpec<S> {
    pub name: String,
    pub kind: DriverKind<S>,
    pub f: GeneratorFn<S>,
    pub f0: SourceFn<S>,
    /// Monotonicity constant in `y`.
    pub chi: S,
    /// Lipschitz constant in `z`.
    pub lipschitz_z: S,
    pub q: Option<S>,
    /// Coefficient of the absorbing term: `f(t,y,z) <= -a(t) y|y|^q + f(t,0,z)`.
    pub a: Option<TimeFn<S>>,
    pub ell: S,
    /// `f` does not read `z`.
    pub z_free: bool,
    /// `f(t, 0, 0)` is identically zero.
    pub f0_vanishes: bool,
    /// Truncation level applied to `f0`, if any.
    pub cap: Option<S>,
    /// Closed form of `f(t,y,z) + a(t) y|y|^q` when one is known.
    pub remainder: Option<GeneratorFn<S>>,
}

impl<S: fmt::Debug> fmt::Debug for DriverSpec<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriverSpec")
            .field("name", &self.name)
            .field("q", &self.q)
            .field("ell", &self.ell)
            .field("cap", &self.cap)
            .finish()
    }
}

fn abs_power<S: Scalar>(y: S, q: S) -> S {
    y * y.abs().powf(q)
}

impl<S: Scalar> DriverSpec<S> {
    pub fn toy(q: S) -> Self {
        Self {
            name: "toy".into(),
            kind: DriverKind::Toy,
            f: Arc::new(move |_t, y, _z, _c| -abs_power(y, q)),
            f0: Arc::new(|_t, _c| S::zero()),
            chi: S::zero(),
            lipschitz_z: S::zero(),
            q: Some(q),
            a: Some(Arc::new(|_t| S::one())),
            ell: S::one(),
            z_free: true,
            f0_vanishes: true,
            cap: None,
            remainder: Some(Arc::new(|_t, _y, _z, _c| S::zero())),
        }
    }

    pub fn control(q: S, alpha: TimeFn<S>, gamma: TimeFn<S>, ell: S) -> Self {
        let (al, ga) = (alpha.clone(), gamma.clone());
        let f: GeneratorFn<S> = Arc::new(move |t, y, _z, _c| -abs_power(y, q) / (q * al(t).powf(q)) + ga(t));
        let g0 = gamma.clone();
        let g1 = gamma.clone();
        let a0 = alpha.clone();
        Self {
            name: "control".into(),
            kind: DriverKind::Control { alpha, gamma },
            f,
            f0: Arc::new(move |t, _c| g0(t)),
            chi: S::zero(),
            lipschitz_z: S::zero(),
            q: Some(q),
            a: Some(Arc::new(move |t| S::one() / (q * a0(t).powf(q)))),
            ell,
            z_free: true,
            f0_vanishes: false,
            cap: None,
            remainder: Some(Arc::new(move |t, _y, _z, _c| g1(t))),
        }
    }

    pub fn control_constant(q: S, alpha: S, gamma: S, ell: S) -> Self {
        let mut d = Self::control(q, Arc::new(move |_t| alpha), Arc::new(move |_t| gamma), ell);
        d.f0_vanishes = gamma == S::zero();
        d
    }

    pub fn zero() -> Self {
        Self {
            name: "zero".into(),
            kind: DriverKind::Zero,
            f: Arc::new(|_t, _y, _z, _c| S::zero()),
            f0: Arc::new(|_t, _c| S::zero()),
            chi: S::zero(),
            lipschitz_z: S::zero(),
            q: None,
            a: None,
            ell: lit(2.0),
            z_free: true,
            f0_vanishes: true,
            cap: None,
            remainder: None,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn custom(
        name: impl Into<String>,
        f: GeneratorFn<S>,
        f0: SourceFn<S>,
        chi: S,
        lipschitz_z: S,
        q: Option<S>,
        a: Option<TimeFn<S>>,
        ell: S,
    ) -> Self {
        Self {
            name: name.into(),
            kind: DriverKind::Custom,
            f,
            f0,
            chi,
            lipschitz_z,
            q,
            a,
            ell,
            z_free: false,
            f0_vanishes: false,
            cap: None,
            remainder: None,
        }
    }

    pub fn evaluate(&self, t: S, y: S, z: &[S], ctx: &DriverContext<'_, S>) -> Result<S> {
        let v = (self.f)(t, y, z, ctx);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteDriver { t: to_f64(t), y: to_f64(y) })
        }
    }

    /// `f(t,y,z) + a(t) y|y|^q`: the generator without its absorption term.
    pub fn remainder_at(&self, t: S, y: S, z: &[S], ctx: &DriverContext<'_, S>) -> Option<S> {
        if let Some(r) = &self.remainder {
            return Some(r(t, y, z, ctx));
        }
        let (q, a) = (self.q?, self.a.as_ref()?);
        Some((self.f)(t, y, z, ctx) + a(t) * abs_power(y, q))
    }

    pub fn a_at(&self, t: S) -> Option<S> {
        self.a.as_ref().map(|a| a(t))
    }

    /// `int_s^t a(u) du`, exact for polynomial `a` up to degree 7.
    pub fn a_integral(&self, s: S, t: S) -> Option<S> {
        self.a.as_ref().map(|a| integrate(|u| a(u), s, t, 4, 1))
    }

    /// `f_n = (f - f0) + min(f0, n)`.
    pub fn truncate(&self, n: S) -> Result<Self> {
        if !(n > S::zero()) {
            return Err(Error::InvalidParameter(format!("truncation level {n} must be positive")));
        }
        let mut out = self.clone();
        out.cap = Some(self.cap.map_or(n, |c| c.min(n)));
        if self.f0_vanishes {
            return Ok(out);
        }
        let (f, f0) = (self.f.clone(), self.f0.clone());
        out.f = Arc::new(move |t, y, z, c| {
            let s = f0(t, c);
            f(t, y, z, c) - s + s.min(n)
        });
        if let Some(r) = self.remainder.clone() {
            let f0 = self.f0.clone();
            out.remainder = Some(Arc::new(move |t, y, z, c| {
                let s = f0(t, c);
                r(t, y, z, c) - s + s.min(n)
            }));
        }
        let f0 = self.f0.clone();
        out.f0 = Arc::new(move |t, c| f0(t, c).min(n));
        Ok(out)
    }

    /// Exponent range required by the construction of singular solutions:
    /// `q > 2` and `1 < ell < 2q/(2+q)`, or `ell = 1` when `f0` vanishes.
    pub fn validate_for_singular(&self) -> Result<()> {
        let q = self
            .q
            .ok_or_else(|| Error::InvalidParameter(format!("driver {} has no absorption exponent", self.name)))?;
        if !(q > lit(2.0)) {
            return Err(Error::InvalidParameter(format!("singular runs need q > 2, got {q}")));
        }
        let upper = lit::<S>(2.0) * q / (lit::<S>(2.0) + q);
        let ok = (self.f0_vanishes && self.ell == S::one()) || (self.ell > S::one() && self.ell < upper);
        if !ok {
            return Err(Error::InvalidParameter(format!("ell = {} outside (1, {upper}) for q = {q}", self.ell)));
        }
        Ok(())
    }
}

/// Sampling ranges for [`check_condition_a`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSample<S> {
    pub horizon: S,
    pub y_range: (S, S),
    pub z_range: (S, S),
    pub z_dim: usize,
    pub samples: usize,
    pub quadrature_nodes: usize,
    pub seed: u64,
}

impl<S: Scalar> ConditionSample<S> {
    pub fn new(horizon: S) -> Self {
        Self {
            horizon,
            y_range: (lit(-10.0), lit(10.0)),
            z_range: (lit(-10.0), lit(10.0)),
            z_dim: 1,
            samples: 10_000,
            quadrature_nodes: 10_000,
            seed: 0,
        }
    }
}

/// Worst observed excess in each inequality; positive values beyond the
/// tolerance are violations.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport<S> {
    pub monotonicity_excess: S,
    pub monotonicity_violations: usize,
    pub lipschitz_excess: S,
    pub lipschitz_violations: usize,
    pub absorption_excess: Option<S>,
    pub absorption_violations: usize,
    /// `int_0^T (1/(q a))^{ell/q} + f0^ell dt`.
    pub integrability: Option<S>,
    pub samples: usize,
}

impl<S: Scalar> ConditionReport<S> {
    pub fn violations(&self) -> usize {
        self.monotonicity_violations + self.lipschitz_violations + self.absorption_violations
    }
}

fn uniform<S: Scalar>(rng: &mut ChaCha8Rng, lo: S, hi: S) -> S {
    let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    lo + (hi - lo) * lit(u)
}

pub fn check_condition_a<S: Scalar>(d: &DriverSpec<S>, sample: &ConditionSample<S>) -> ConditionReport<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample.seed);
    let ctx = DriverContext::none();
    let tol = |scale: S| lit::<S>(1e-10) * (S::one() + scale.abs());
    let mut report = ConditionReport {
        monotonicity_excess: S::neg_infinity(),
        monotonicity_violations: 0,
        lipschitz_excess: S::neg_infinity(),
        lipschitz_violations: 0,
        absorption_excess: d.q.and(d.a.as_ref()).map(|_| S::neg_infinity()),
        absorption_violations: 0,
        integrability: None,
        samples: sample.samples,
    };
    let mut z = vec![S::zero(); sample.z_dim];
    let mut z2 = vec![S::zero(); sample.z_dim];
    for _ in 0..sample.samples {
        let t = uniform(&mut rng, S::zero(), sample.horizon);
        let y = uniform(&mut rng, sample.y_range.0, sample.y_range.1);
        let y2 = uniform(&mut rng, sample.y_range.0, sample.y_range.1);
        for (a, b) in z.iter_mut().zip(z2.iter_mut()) {
            *a = uniform(&mut rng, sample.z_range.0, sample.z_range.1);
            *b = uniform(&mut rng, sample.z_range.0, sample.z_range.1);
        }
        let fy = (d.f)(t, y, &z, &ctx);
        let fy2 = (d.f)(t, y2, &z, &ctx);
        let lhs = (fy - fy2) * (y - y2);
        let m = lhs - d.chi * (y - y2) * (y - y2);
        report.monotonicity_excess = report.monotonicity_excess.max(m);
        if m > tol(lhs) {
            report.monotonicity_violations += 1;
        }
        let fz2 = (d.f)(t, y, &z2, &ctx);
        let dz = z.iter().zip(&z2).fold(S::zero(), |s, (a, b)| s + (*a - *b) * (*a - *b)).sqrt();
        let l = (fy - fz2).abs() - d.lipschitz_z * dz;
        report.lipschitz_excess = report.lipschitz_excess.max(l);
        if l > tol(fy) {
            report.lipschitz_violations += 1;
        }
        if let (Some(q), Some(a)) = (d.q, d.a.as_ref()) {
            let yp = y.abs();
            let fyp = (d.f)(t, yp, &z, &ctx);
            let f0z = (d.f)(t, S::zero(), &z, &ctx);
            let bound = -a(t) * abs_power(yp, q) + f0z;
            let e = fyp - bound;
            let worst = report.absorption_excess.unwrap_or(e).max(e);
            report.absorption_excess = Some(worst);
            if e > tol(bound) {
                report.absorption_violations += 1;
            }
        }
    }
    if let (Some(q), Some(a)) = (d.q, d.a.as_ref()) {
        let ell = d.ell;
        let f0 = d.f0.clone();
        let integrand = |t: S| (S::one() / (q * a(t))).powf(ell / q) + f0(t, &ctx).powf(ell);
        let panels = (sample.quadrature_nodes / 4).max(1);
        report.integrability = Some(integrate(integrand, S::zero(), sample.horizon, 4, panels));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn toy_value() {
        let d = DriverSpec::<f64>::toy(3.0);
        assert_eq!(d.evaluate(0.0, 2.0, &[0.0], &DriverContext::none()).unwrap(), -16.0);
        assert_eq!(d.evaluate(0.0, -2.0, &[0.0], &DriverContext::none()).unwrap(), 16.0);
    }

    #[test]
    fn control_value_at_zero() {
        let d = DriverSpec::<f64>::control_constant(3.0, 1.0, 5.0, 1.1);
        assert_eq!(d.evaluate(0.3, 0.0, &[7.0], &DriverContext::none()).unwrap(), 5.0);
        assert_eq!((d.f0)(0.3, &DriverContext::none()), 5.0);
    }

    #[test]
    fn truncation_caps_source() {
        let d = DriverSpec::<f64>::control_constant(3.0, 1.0, 5.0, 1.1).truncate(3.0).unwrap();
        assert_eq!(d.evaluate(0.0, 0.0, &[0.0], &DriverContext::none()).unwrap(), 3.0);
        let big = DriverSpec::<f64>::control_constant(3.0, 1.0, 5.0, 1.1);
        let capped = big.truncate(1e6).unwrap();
        for y in [-2.0, 0.0, 0.5, 4.0] {
            let a = big.evaluate(0.5, y, &[0.0], &DriverContext::none()).unwrap();
            let b = capped.evaluate(0.5, y, &[0.0], &DriverContext::none()).unwrap();
            assert_eq!(a, b);
        }
        assert!(big.truncate(0.0).is_err());
    }

    #[test]
    fn toy_truncation_idles() {
        let d = DriverSpec::<f64>::toy(3.0);
        let t = d.truncate(2.0).unwrap();
        for y in [-1.0, 0.0, 3.0] {
            assert_eq!(
                d.evaluate(0.0, y, &[0.0], &DriverContext::none()).unwrap(),
                t.evaluate(0.0, y, &[0.0], &DriverContext::none()).unwrap()
            );
        }
    }

    #[test]
    fn toy_satisfies_conditions() {
        let r = check_condition_a(&DriverSpec::<f64>::toy(3.0), &ConditionSample::new(1.0));
        assert_eq!(r.violations(), 0);
    }

    #[test]
    fn control_satisfies_conditions() {
        let d = DriverSpec::<f64>::control_constant(3.0, 1.0, 5.0, 1.1);
        let r = check_condition_a(&d, &ConditionSample::new(1.0));
        assert_eq!(r.violations(), 0);
        // 1/(q a) = alpha^q = 1, so the integrand is 1 + 5^ell.
        let expected = 1.0 + 5f64.powf(1.1);
        assert!((r.integrability.unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn broken_driver_is_flagged() {
        let d = DriverSpec::<f64>::custom(
            "square",
            Arc::new(|_t, y, _z, _c| y * y),
            Arc::new(|_t, _c| 0.0),
            0.0,
            0.0,
            Some(3.0),
            Some(Arc::new(|_t| 1.0)),
            1.1,
        );
        let r = check_condition_a(&d, &ConditionSample::new(1.0));
        assert!(r.monotonicity_violations > 0);
        assert!(r.absorption_violations > 0);
    }

    #[test]
    fn exponent_range() {
        assert!(DriverSpec::<f64>::toy(3.0).validate_for_singular().is_ok());
        assert!(DriverSpec::<f64>::toy(2.0).validate_for_singular().is_err());
        assert!(DriverSpec::<f64>::control_constant(3.0, 1.0, 5.0, 1.1).validate_for_singular().is_ok());
        assert!(DriverSpec::<f64>::control_constant(3.0, 1.0, 5.0, 1.3).validate_for_singular().is_err());
        assert!(DriverSpec::<f64>::control_constant(3.0, 1.0, 5.0, 1.0).validate_for_singular().is_err());
        assert!(DriverSpec::<f64>::zero().validate_for_singular().is_err());
    }

    #[test]
    fn remainder_matches_definition() {
        let ctx = DriverContext::none();
        for d in [
            DriverSpec::<f64>::toy(3.0),
            DriverSpec::control_constant(3.0, 0.8, 2.0, 1.1),
            DriverSpec::control_constant(3.0, 0.8, 2.0, 1.1).truncate(1.5).unwrap(),
        ] {
            let a = d.a_at(0.2).unwrap();
            for y in [0.0, 0.7, 2.0] {
                let direct = d.evaluate(0.2, y, &[0.0], &ctx).unwrap() + a * y.powi(4);
                let closed = d.remainder_at(0.2, y, &[0.0], &ctx).unwrap();
                assert!((direct - closed).abs() < 1e-12, "{}", d.name);
            }
        }
        assert!(DriverSpec::<f64>::zero().remainder_at(0.0, 1.0, &[0.0], &ctx).is_none());
    }

    #[test]
    fn control_absorption_is_an_identity() {
        let d = DriverSpec::<f64>::control_constant(3.0, 0.7, 2.0, 1.1);
        let a = d.a_at(0.0).unwrap();
        for y in [0.0, 0.5, 1.0, 3.0] {
            let lhs = d.evaluate(0.0, y, &[0.0], &DriverContext::none()).unwrap();
            let rhs = -a * y.powi(4) + 2.0;
            assert!((lhs - rhs).abs() < 1e-12 * (1.0 + rhs.abs()));
        }
    }

    proptest! {
        #[test]
        fn truncation_is_monotone_in_level(
            m in 0.01f64..100.0, extra in 0.0f64..100.0,
            y in -5.0f64..5.0, t in 0.0f64..1.0, g in 0.0f64..50.0,
        ) {
            let d = DriverSpec::<f64>::control_constant(3.0, 1.0, g, 1.1);
            let fm = d.truncate(m).unwrap().evaluate(t, y, &[0.0], &DriverContext::none()).unwrap();
            let fn_ = d.truncate(m + extra).unwrap().evaluate(t, y, &[0.0], &DriverContext::none()).unwrap();
            prop_assert!(fm <= fn_);
        }
    }
}
