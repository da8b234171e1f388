//! Difference-in-differences estimators: baseline interaction, event-study
//! decomposition, moderation designs, and split-sample comparison.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::panel::{KeyVar, PanelDataset};
use crate::regress::{ols_cluster, FixedEffectSpec, RegressionResult};
use crate::stats;

use super::matching::WeightVector;

/// Name given to the treatment-post interaction regressor.
pub const INTERACTION: &str = "treat_post";

/// Specification of the baseline design.
#[derive(Debug, Clone)]
pub struct DidSpec {
    /// Outcome column.
    pub outcome: String,
    /// Time-invariant binary treatment column.
    pub treat: String,
    /// First post-period year (`Post = 1` iff `year >= policy_year`).
    pub policy_year: i32,
    /// Control columns entering linearly.
    pub controls: Vec<String>,
    /// Fixed effects to absorb.
    pub fe: FixedEffectSpec,
    /// Cluster key for the covariance estimator.
    pub cluster: KeyVar,
}

impl DidSpec {
    /// Baseline design: saturated fixed effects, firm-level clustering, no
    /// controls (add them via the field).
    pub fn new(outcome: impl Into<String>, treat: impl Into<String>, policy_year: i32) -> DidSpec {
        DidSpec {
            outcome: outcome.into(),
            treat: treat.into(),
            policy_year,
            controls: Vec::new(),
            fe: FixedEffectSpec::four_way(),
            cluster: KeyVar::Firm,
        }
    }
}

/// Rows usable for estimation plus their treatment values.
pub(super) struct Frame {
    pub rows: Vec<usize>,
    pub y: Vec<f64>,
    pub treat: Vec<f64>,
    pub post: Vec<f64>,
    pub controls: Vec<(String, Vec<f64>)>,
    pub cluster: Vec<usize>,
}

impl Frame {
    /// Assemble the estimation sample: rows complete on outcome, treatment
    /// and controls, with the treatment validated as binary and
    /// time-invariant within firm.
    pub fn build(data: &PanelDataset, spec: &DidSpec) -> Result<Frame> {
        let mut needed: Vec<&str> = vec![&spec.outcome, &spec.treat];
        needed.extend(spec.controls.iter().map(|s| s.as_str()));
        let rows = data.complete_rows(&needed)?;
        if rows.is_empty() {
            return Err(Error::data("no complete observations for the design".to_string()));
        }

        let y = data.dense_at(&spec.outcome, &rows)?;
        let treat = data.dense_at(&spec.treat, &rows)?;
        if treat.iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(Error::data(format!(
                "treatment column `{}` must be 0/1",
                spec.treat
            )));
        }
        let firms = data.firm_codes();
        let mut by_firm: Vec<Option<f64>> = vec![None; data.n_firms()];
        for (&i, &t) in rows.iter().zip(&treat) {
            match by_firm[firms[i]] {
                None => by_firm[firms[i]] = Some(t),
                Some(prev) if prev != t => {
                    return Err(Error::data(format!(
                        "treatment column `{}` varies within firm `{}`",
                        spec.treat,
                        data.firm_label(firms[i])
                    )))
                }
                _ => {}
            }
        }
        if !treat.contains(&1.0) || !treat.contains(&0.0) {
            return Err(Error::data("design needs both treated and control firms".to_string()));
        }

        let years = data.years();
        let post: Vec<f64> =
            rows.iter().map(|&i| if years[i] >= spec.policy_year { 1.0 } else { 0.0 }).collect();
        let mut controls = Vec::with_capacity(spec.controls.len());
        for name in &spec.controls {
            controls.push((name.clone(), data.dense_at(name, &rows)?));
        }
        let (cluster_all, _) = data.key_codes(spec.cluster);
        let cluster = rows.iter().map(|&i| cluster_all[i]).collect();
        Ok(Frame { rows, y, treat, post, controls, cluster })
    }

    /// Per-row weights for the sample, when a weight vector is supplied.
    pub fn weights(&self, weights: Option<&WeightVector>) -> Result<Option<Vec<f64>>> {
        match weights {
            None => Ok(None),
            Some(w) => {
                let per_row = &w.weights;
                if let Some(&i) = self.rows.iter().find(|&&i| i >= per_row.len()) {
                    return Err(Error::data(format!(
                        "weight vector has {} entries but the sample uses row {i}",
                        per_row.len()
                    )));
                }
                Ok(Some(self.rows.iter().map(|&i| per_row[i]).collect()))
            }
        }
    }
}

/// Estimate the baseline design: outcome on `Treat x Post` plus controls
/// under absorbed fixed effects, optionally weighted (reweighting reruns).
///
/// The coefficient of interest is [`INTERACTION`]. Treatment and post main
/// effects are absorbed by the firm and year dimensions, so only the
/// interaction enters the regressor list.
pub fn did_estimate(
    data: &PanelDataset,
    spec: &DidSpec,
    weights: Option<&WeightVector>,
) -> Result<RegressionResult> {
    let frame = Frame::build(data, spec)?;
    let w = frame.weights(weights)?;
    let tp: Vec<f64> = frame.treat.iter().zip(&frame.post).map(|(t, p)| t * p).collect();
    let mut x = vec![(INTERACTION.to_string(), tp)];
    x.extend(frame.controls.iter().cloned());
    let effects = spec.fe.resolve(data, &frame.rows)?;
    ols_cluster(&frame.y, &x, &effects, &frame.cluster, w.as_deref())
}

/// Event-time window and reference period for the event study.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EventWindow {
    /// Earliest event time with its own indicator.
    pub min: i32,
    /// Latest event time with its own indicator.
    pub max: i32,
    /// Omitted reference event time.
    pub omitted: i32,
}

impl EventWindow {
    /// The reporting window used throughout: -4..=+3 with -1 omitted.
    /// Years outside the window carry no indicator and join the reference.
    pub fn standard() -> EventWindow {
        EventWindow { min: -4, max: 3, omitted: -1 }
    }
}

/// One event-time coefficient.
#[derive(Debug, Clone, Serialize)]
pub struct EventTimeEstimate {
    /// Years since the policy year.
    pub tau: i32,
    /// Treated-minus-control effect relative to the reference period.
    pub estimate: f64,
    /// Cluster-robust standard error.
    pub se: f64,
    /// t statistic.
    pub t: f64,
    /// Two-sided p-value with G-1 degrees of freedom.
    pub p: f64,
    /// 95% confidence interval.
    pub ci: (f64, f64),
}

/// Event-study decomposition of the treatment path.
#[derive(Debug, Clone, Serialize)]
pub struct EventStudyResult {
    /// Per-event-time estimates, ascending in tau; the reference period is
    /// not reported.
    pub estimates: Vec<EventTimeEstimate>,
    /// The omitted reference event time.
    pub omitted_period: i32,
    /// Full regression behind the estimates.
    #[serde(skip)]
    pub regression: RegressionResult,
}

/// Replace the single interaction with per-event-time treatment indicators.
///
/// Every window event time except the reference gets `Treat x 1[tau = j]`;
/// years outside the window join the reference. Each coefficient carries a
/// cluster-robust confidence interval.
pub fn event_study(
    data: &PanelDataset,
    spec: &DidSpec,
    window: EventWindow,
) -> Result<EventStudyResult> {
    if window.min > window.max {
        return Err(Error::config(format!(
            "event window [{}, {}] is empty",
            window.min, window.max
        )));
    }
    if window.omitted < window.min || window.omitted > window.max {
        return Err(Error::config(format!(
            "omitted event time {} lies outside the window [{}, {}]",
            window.omitted, window.min, window.max
        )));
    }
    let frame = Frame::build(data, spec)?;
    let years = data.years();

    let mut x: Vec<(String, Vec<f64>)> = Vec::new();
    let mut taus = Vec::new();
    for tau in window.min..=window.max {
        if tau == window.omitted {
            continue;
        }
        let col: Vec<f64> = frame
            .rows
            .iter()
            .zip(&frame.treat)
            .map(|(&i, &t)| if years[i] - spec.policy_year == tau { t } else { 0.0 })
            .collect();
        if col.iter().all(|&v| v == 0.0) {
            return Err(Error::data(format!(
                "event time {tau} has no treated observations"
            )));
        }
        x.push((event_name(tau), col));
        taus.push(tau);
    }
    x.extend(frame.controls.iter().cloned());

    let effects = spec.fe.resolve(data, &frame.rows)?;
    let fit = ols_cluster(&frame.y, &x, &effects, &frame.cluster, None)?;
    let mut estimates = Vec::with_capacity(taus.len());
    for &tau in &taus {
        let c = fit.coefficient(&event_name(tau))?;
        estimates.push(EventTimeEstimate {
            tau,
            estimate: c.estimate,
            se: c.se,
            t: c.t,
            p: c.p,
            ci: fit.ci95(&event_name(tau))?,
        });
    }
    Ok(EventStudyResult { estimates, omitted_period: window.omitted, regression: fit })
}

/// Stable regressor name for an event-time indicator.
pub(crate) fn event_name(tau: i32) -> String {
    if tau < 0 {
        format!("treat_m{}", -tau)
    } else {
        format!("treat_p{tau}")
    }
}

/// Augment the baseline design with a moderator main effect and its
/// interaction with `Treat x Post`.
///
/// With `demean_moderator`, the moderator is centered at its sample mean
/// before interacting, so the interaction coefficient reads as the
/// moderation slope at the average moderator level while the [`INTERACTION`]
/// coefficient keeps its baseline interpretation. A time-invariant
/// moderator's main effect is absorbed by the firm dimension and reported
/// among the dropped collinear regressors; the same happens to the
/// interaction itself when the moderator is constant.
pub fn moderated_did(
    data: &PanelDataset,
    spec: &DidSpec,
    moderator: &str,
    demean_moderator: bool,
) -> Result<RegressionResult> {
    let mut inner = spec.clone();
    inner.controls.retain(|c| c != moderator);
    let mut needed = inner.controls.clone();
    needed.push(moderator.to_string());
    inner.controls = needed;
    let frame = Frame::build(data, &inner)?;

    let mod_idx = frame.controls.len() - 1;
    let mut moderator_vals = frame.controls[mod_idx].1.clone();
    if demean_moderator {
        let m = stats::mean(&moderator_vals)?;
        for v in &mut moderator_vals {
            *v -= m;
        }
    }

    let tp: Vec<f64> = frame.treat.iter().zip(&frame.post).map(|(t, p)| t * p).collect();
    let tp_mod: Vec<f64> = tp.iter().zip(&moderator_vals).map(|(a, b)| a * b).collect();
    let mut x = vec![
        (INTERACTION.to_string(), tp),
        (moderator.to_string(), moderator_vals),
        (format!("{INTERACTION}_x_{moderator}"), tp_mod),
    ];
    for (name, col) in &frame.controls[..mod_idx] {
        x.push((name.clone(), col.clone()));
    }
    let effects = spec.fe.resolve(data, &frame.rows)?;
    ols_cluster(&frame.y, &x, &effects, &frame.cluster, None)
}

/// Two subsample fits and permutation inference on their coefficient gap.
#[derive(Debug, Clone, Serialize)]
pub struct SplitComparison {
    /// Fit on firms at or below the median of the split variable.
    pub low: RegressionResult,
    /// Fit on firms above the median.
    pub high: RegressionResult,
    /// Observed `|beta_low - beta_high|`.
    pub observed_gap: f64,
    /// Share of permuted splits with a gap at least as large; absent when
    /// `n_perm = 0`.
    pub p_value: Option<f64>,
    /// Firms per group.
    pub n_low: usize,
    /// Firms per group.
    pub n_high: usize,
    /// Permutation draws skipped because a subsample fit failed.
    pub skipped_draws: usize,
}

/// Median-split the firms on the pre-period mean of `split`, estimate the
/// baseline design per subsample, and test the coefficient gap by permuting
/// the firms' group labels (group sizes preserved).
pub fn subsample_compare(
    data: &PanelDataset,
    spec: &DidSpec,
    split: &str,
    n_perm: usize,
    seed: u64,
) -> Result<SplitComparison> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rayon::prelude::*;

    let split_col = data.column(split)?;
    let years = data.years();
    let firms = data.firm_codes();
    let mut sums: Vec<(f64, f64)> = vec![(0.0, 0.0); data.n_firms()];
    for i in 0..data.n_rows() {
        if years[i] < spec.policy_year {
            if let Some(v) = split_col[i] {
                sums[firms[i]] = (sums[firms[i]].0 + v, sums[firms[i]].1 + 1.0);
            }
        }
    }
    let mut firm_means: Vec<(usize, f64)> = Vec::new();
    for (code, &(s, n)) in sums.iter().enumerate() {
        if n > 0.0 {
            firm_means.push((code, s / n));
        }
    }
    if firm_means.len() < 4 {
        return Err(Error::data(format!(
            "only {} firms have pre-period values of `{split}`",
            firm_means.len()
        )));
    }
    let values: Vec<f64> = firm_means.iter().map(|&(_, m)| m).collect();
    let median = stats::quantile(&values, 0.5)?;
    let assignable: Vec<usize> = firm_means.iter().map(|&(c, _)| c).collect();
    let low_label: Vec<bool> = firm_means.iter().map(|&(_, m)| m <= median).collect();

    let fit_pair = |labels: &[bool]| -> Result<(f64, RegressionResult, RegressionResult)> {
        let mut in_low = vec![false; data.n_firms()];
        let mut in_high = vec![false; data.n_firms()];
        for (&code, &low) in assignable.iter().zip(labels) {
            if low {
                in_low[code] = true;
            } else {
                in_high[code] = true;
            }
        }
        let pick = |mask: &[bool]| -> Vec<usize> {
            (0..data.n_rows()).filter(|&i| mask[firms[i]]).collect()
        };
        let low_fit = did_estimate(&data.subset(&pick(&in_low))?, spec, None)?;
        let high_fit = did_estimate(&data.subset(&pick(&in_high))?, spec, None)?;
        let gap = (low_fit.coefficient(INTERACTION)?.estimate
            - high_fit.coefficient(INTERACTION)?.estimate)
            .abs();
        Ok((gap, low_fit, high_fit))
    };

    let (observed_gap, low, high) = fit_pair(&low_label)?;
    let n_low = low_label.iter().filter(|&&l| l).count();
    let n_high = low_label.len() - n_low;

    let p_value;
    let mut skipped = 0usize;
    if n_perm == 0 {
        p_value = None;
    } else {
        let gaps: Vec<Option<f64>> = (0..n_perm)
            .into_par_iter()
            .map(|draw| {
                let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
                rng.set_stream(draw as u64 + 1);
                let mut labels = low_label.clone();
                labels.shuffle(&mut rng);
                fit_pair(&labels).ok().map(|(g, _, _)| g)
            })
            .collect();
        let ok: Vec<f64> = gaps.iter().flatten().copied().collect();
        skipped = n_perm - ok.len();
        if ok.is_empty() {
            return Err(Error::estimation(
                "every permutation draw failed to estimate".to_string(),
            ));
        }
        let extreme = ok.iter().filter(|&&g| g >= observed_gap).count();
        p_value = Some(extreme as f64 / ok.len() as f64);
    }

    Ok(SplitComparison {
        low,
        high,
        observed_gap,
        p_value,
        n_low,
        n_high,
        skipped_draws: skipped,
    })
}
