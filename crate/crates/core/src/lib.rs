//! Panel-data causal inference toolkit.
//!
//! The crate estimates policy effects on firm panels where treatment is not
//! observed directly but constructed from data: a disclosure-versus-substance
//! residual is estimated year by year, firms are classified by its sign, and a
//! difference-in-differences design around a policy year measures the
//! consequences. Everything an applied workflow needs around that core is
//! included: high-dimensional fixed-effects absorption, cluster-robust
//! inference, event studies, permutation (placebo) inference, propensity-score
//! matching, entropy balancing, a two-stage selection correction, seemingly
//! unrelated regressions with cross-equation tests, a synthetic panel
//! generator with planted ground truth for validation, and a pipeline runner
//! with deterministic, machine-readable reports.
//!
//! Estimators are deterministic given their inputs; randomized procedures
//! (simulation, permutation) take explicit seeds and derive one RNG substream
//! per draw, so results are identical for any worker count.

pub mod causal;
pub mod error;
pub mod panel;
pub mod pipeline;
pub mod regress;
pub mod report;
pub mod stats;
pub mod synth;
pub mod sur;
pub mod washing;

pub use error::{Error, Result};
