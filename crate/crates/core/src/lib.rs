//! Numerical laboratory for backward SDEs with singular terminal values.
//!
//! The crate builds the minimal nonnegative supersolution of
//! `Y(t) = xi + int_t^T f(s, Y, Z) ds - int_t^T Z dW` when `P(xi = +inf) > 0`
//! as the monotone limit of truncated problems, evaluates path-dependent
//! terminal values through non-anticipative functionals of `(X, [X])`, and
//! checks the resulting value process against closed forms, a priori bounds
//! and the optimal liquidation problem it solves.
//!
//! All numerical types are generic over a floating point [`Scalar`]; the
//! aliases at the bottom of this file fix `f64` for everyday use.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod analysis;
pub mod bsde;
pub mod config;
pub mod csvio;
pub mod drivers;
pub mod error;
pub mod functional;
pub mod liquidation;
pub mod noise;
pub mod paths;
pub mod quadrature;
pub mod regression;
pub mod runner;
pub mod sde;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

pub use error::{Error, Result};

/// Floating point type the numerical core is written against.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + Sum + 'static
{
}

impl<T> Scalar for T where
    T: Float + FloatConst + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + Sum + 'static
{
}

/// Converts an `f64` literal into the working scalar.
#[inline]
pub fn lit<S: Scalar>(x: f64) -> S {
    S::from_f64(x).expect("literal representable in scalar type")
}

/// Converts a count into the working scalar.
#[inline]
pub fn count<S: Scalar>(n: usize) -> S {
    S::from_usize(n).expect("count representable in scalar type")
}

#[inline]
pub(crate) fn to_f64<S: Scalar>(x: S) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

pub type TimeGrid = paths::TimeGrid<f64>;
pub type DiscretePath = paths::DiscretePath<f64>;
pub type StoppedPath = paths::StoppedPath<f64>;
pub type FunctionalSpec = functional::FunctionalSpec<f64>;
pub type SdeModel = sde::SdeModel<f64>;
pub type Ensemble = sde::Ensemble<f64>;

pub type TimeGrid32 = paths::TimeGrid<f32>;
pub type DiscretePath32 = paths::DiscretePath<f32>;
pub type FunctionalSpec32 = functional::FunctionalSpec<f32>;
pub type DriverSpec = drivers::DriverSpec<f64>;
pub type TerminalSpec = bsde::TerminalSpec<f64>;
pub type BsdeSolution = bsde::BsdeSolution<f64>;
pub type RegressionBasis = regression::RegressionBasis<f64>;
pub type Ladder = bsde::Ladder<f64>;
pub type TestFunction = analysis::TestFunction<f64>;
pub type ControlProblem = liquidation::ControlProblem<f64>;
pub type ControlPolicy = liquidation::ControlPolicy<f64>;

pub use config::ExperimentConfig;
pub use runner::{run, RunManifest, RunOptions};
