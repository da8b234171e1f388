//! Treatment-effect estimators and their robustness battery.
//!
//! The baseline design interacts a time-invariant firm treatment label with
//! a post-policy indicator under absorbed fixed effects; around it sit the
//! event-study decomposition, permutation-based placebo inference,
//! propensity-score and entropy-balancing reweighting, a two-stage
//! selection correction, moderation/triple-difference designs, and
//! split-sample comparisons with permutation inference on the coefficient
//! gap.
//!
//! # References
//!
//! - Angrist, J. D. & Pischke, J.-S. (2009). *Mostly Harmless Econometrics*.
//!   Princeton University Press.
//! - Hainmueller, J. (2012). Entropy balancing for causal effects.
//!   *Political Analysis*, 20(1), 25-46.
//! - Heckman, J. (1979). Sample selection bias as a specification error.
//!   *Econometrica*, 47(1), 153-161.

mod did;
mod heckman;
mod matching;
mod placebo;

pub use did::{
    did_estimate, event_study, moderated_did, subsample_compare, DidSpec, EventStudyResult,
    EventTimeEstimate, EventWindow, SplitComparison,
};
pub use heckman::{heckman_two_stage, HeckmanResult, SelectionSpec};
pub use did::INTERACTION;
pub use heckman::IMR_NAME;
pub use matching::{
    balance_diagnostics, entropy_balance, entropy_balance_yearly, firm_weights_to_rows,
    pre_period_means, psm_match, BalanceRow, WeightMethod, WeightVector,
};
pub use placebo::{placebo_permutation, PlaceboResult};
