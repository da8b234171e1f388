//! Two-stage selection correction for the baseline design.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::panel::PanelDataset;
use crate::regress::{binary_mle, Link, MleResult, RegressionResult};
use crate::stats;

use super::did::{did_estimate, DidSpec};

/// Name given to the correction regressor in the second stage.
pub const IMR_NAME: &str = "imr";

/// First-stage selection equation.
#[derive(Debug, Clone)]
pub struct SelectionSpec {
    /// Binary column marking rows with an observed outcome.
    pub selected: String,
    /// Excluded instrument: enters selection, barred from the outcome.
    pub instrument: String,
    /// Further selection controls (entry barriers and the like).
    pub controls: Vec<String>,
}

/// Both stages of the correction.
#[derive(Debug, Clone, Serialize)]
pub struct HeckmanResult {
    /// Probit selection equation.
    pub first_stage: MleResult,
    /// Inverse Mills ratio per panel row; present on selected first-stage
    /// rows only.
    pub imr: Vec<Option<f64>>,
    /// Rows whose ratio was clamped in the deep tail.
    pub clamped_rows: usize,
    /// Outcome equation augmented with the correction term.
    #[serde(skip)]
    pub second_stage: RegressionResult,
    /// Coefficient on the correction term.
    pub imr_coefficient: f64,
    /// Two-sided p-value of the correction term.
    pub imr_p: f64,
}

/// Probit selection stage, inverse Mills ratio, and corrected second stage.
///
/// Stage 1 fits `selected ~ instrument + selection controls + Treat x Post`
/// as a pooled probit over all rows with complete selection inputs; the
/// inverse Mills ratio `phi(z)/Phi(z)` is evaluated at each selected row's
/// linear index. Stage 2 re-estimates the baseline design with the ratio
/// appended to the controls; under no selection on unobservables its
/// coefficient is centered at zero.
pub fn heckman_two_stage(
    data: &PanelDataset,
    selection: &SelectionSpec,
    outcome: &DidSpec,
) -> Result<HeckmanResult> {
    if outcome.controls.contains(&selection.instrument) || outcome.outcome == selection.instrument
    {
        return Err(Error::config(format!(
            "instrument `{}` must be excluded from the outcome equation",
            selection.instrument
        )));
    }
    if selection.controls.contains(&selection.instrument) {
        return Err(Error::config("instrument duplicated among selection controls".to_string()));
    }

    // Stage 1 sample: complete selection inputs (the outcome may be missing
    // exactly where selection failed — that is the point).
    let mut needed: Vec<&str> = vec![&selection.selected, &selection.instrument, &outcome.treat];
    needed.extend(selection.controls.iter().map(|s| s.as_str()));
    let rows = data.complete_rows(&needed)?;
    if rows.is_empty() {
        return Err(Error::data("no complete rows for the selection equation".to_string()));
    }
    let s = data.dense_at(&selection.selected, &rows)?;
    if s.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::data(format!(
            "selection column `{}` must be 0/1",
            selection.selected
        )));
    }

    let years = data.years();
    let treat = data.dense_at(&outcome.treat, &rows)?;
    let tp: Vec<f64> = rows
        .iter()
        .zip(&treat)
        .map(|(&i, &t)| if years[i] >= outcome.policy_year { t } else { 0.0 })
        .collect();
    let mut x = vec![(selection.instrument.clone(), data.dense_at(&selection.instrument, &rows)?)];
    for name in &selection.controls {
        x.push((name.clone(), data.dense_at(name, &rows)?));
    }
    x.push((super::did::INTERACTION.to_string(), tp));

    let (cluster_all, _) = data.key_codes(outcome.cluster);
    let cluster: Vec<usize> = rows.iter().map(|&i| cluster_all[i]).collect();
    let first_stage = binary_mle(&s, &x, Link::Probit, &cluster)?;

    // Inverse Mills ratio at the fitted index, for selected rows.
    let cols: Vec<Vec<f64>> = x.iter().map(|(_, c)| c.clone()).collect();
    let index = first_stage.linear_index(&cols)?;
    let mut imr: Vec<Option<f64>> = vec![None; data.n_rows()];
    let mut clamped_rows = 0usize;
    for (j, &i) in rows.iter().enumerate() {
        if s[j] == 1.0 {
            let (value, clamped) = stats::inverse_mills(index[j]);
            clamped_rows += usize::from(clamped);
            imr[i] = Some(value);
        }
    }

    // Stage 2: the baseline design plus the correction term. Unselected
    // rows drop out through the missing ratio.
    let mut augmented = data.clone();
    augmented.set_column(IMR_NAME, imr.clone())?;
    let mut spec = outcome.clone();
    spec.controls.push(IMR_NAME.to_string());
    let second_stage = did_estimate(&augmented, &spec, None)?;
    let c = second_stage.coefficient(IMR_NAME)?;
    let (imr_coefficient, imr_p) = (c.estimate, c.p);

    Ok(HeckmanResult { first_stage, imr, clamped_rows, second_stage, imr_coefficient, imr_p })
}
