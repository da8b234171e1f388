//! Regression engine: fixed-effect absorption, clustered least squares, and
//! binary maximum likelihood with marginal effects.

pub mod absorb;
pub mod mle;
pub mod ols;

pub use absorb::{drop_singletons, Absorber, EffectKey, FixedEffectSpec, ResolvedEffects};
pub use mle::{binary_mle, marginal_effects, Link, MarginalEffect, MleResult};
pub(crate) use ols::detect_independent_columns;
pub use ols::{ols_cluster, Coefficient, RegressionResult};
