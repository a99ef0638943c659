//! Quenched transfer-operator laboratory for piecewise-expanding interval maps.
//!
//! The crate builds random compositions of piecewise-affine expanding maps of
//! `[0,1)` driven by an invertible base system, discretizes their transfer
//! operators on a uniform partition, and extracts the analytic predictors that
//! govern Birkhoff sums of bounded observables: asymptotic covariance,
//! convex rate functions, Gaussian and Edgeworth distribution models, local
//! window asymptotics, moderate-deviation scalings, concentration bounds and
//! sharp tail prefactors. A counter-based Monte Carlo engine produces the
//! matching empirical statistics so every predictor can be checked against
//! simulation.
//!
//! Module map:
//! - [`base`]: the driving system, its two-sided orbits and fiber symbols.
//! - [`maps`]: piecewise-affine expanding maps and observables.
//! - [`ulam`]: step densities, variation, and the discretized operators.
//! - [`system`]: glue tying a base orbit to per-fiber operators.
//! - [`twisted`]: tilted operator cocycles, equivariant densities, growth
//!   rates and their derivatives.
//! - [`limits`]: covariance, Legendre transforms, Edgeworth/concentration/
//!   local-limit predictors.
//! - [`mc`]: reproducible quenched Monte Carlo and empirical summaries.

pub mod base;
pub mod dist;
pub mod error;
pub mod limits;
pub mod maps;
pub mod mc;
pub mod rng;
pub mod system;
pub mod twisted;
pub mod ulam;

pub use base::{BaseOrbit, BaseSystem, OmegaState};
pub use error::{Error, Result};
pub use maps::{FiberSelector, Observable, PiecewiseAffineMap, Waveform};
pub use system::QuenchedSystem;
pub use ulam::{ComplexStep, Partition, StepDensity, UlamOperator};
