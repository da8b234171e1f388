//! Reweighting estimators: propensity-score matching, entropy balancing,
//! and covariate balance diagnostics.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::panel::{PanelBuilder, PanelDataset};
use crate::regress::{binary_mle, Link};
use crate::stats;

/// Which reweighting produced a weight vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMethod {
    /// Nearest-neighbor propensity-score matching.
    Psm,
    /// Entropy balancing.
    Eb,
}

/// Standardized bias of one covariate before and after weighting.
///
/// Bias is `100 * (mean_T - mean_C) / sqrt((var_T + var_C) / 2)` with the
/// group variances taken unweighted (pre-weighting) in both columns, per
/// the usual matching-diagnostics convention.
#[derive(Debug, Clone, Serialize)]
pub struct BalanceRow {
    /// Covariate name.
    pub covariate: String,
    /// Bias in percent before weighting.
    pub before: f64,
    /// Bias in percent after weighting; equals `before` when no weights.
    pub after: f64,
}

/// Per-observation weights plus their provenance and diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct WeightVector {
    /// Non-negative weight per row of the dataset the weights were built on.
    pub weights: Vec<f64>,
    /// Producing method.
    pub method: WeightMethod,
    /// Per-covariate standardized bias before/after.
    pub diagnostics: Vec<BalanceRow>,
    /// Treated units left unmatched (weight zero); PSM only.
    pub unmatched_treated: usize,
    /// Firms that never appear in the balancing window and so carry the
    /// default weight 1; yearly entropy balancing only.
    pub defaulted_firms: Vec<String>,
}

/// Collapse pre-policy rows to one firm-level row of covariate means.
///
/// The result has one row per firm with at least one complete pre-policy
/// observation, keyed by the firm's industry/province and the final
/// pre-policy year; `columns` are averaged over the window. A matching run
/// on this dataset is a firm-level match on pre-period characteristics.
pub fn pre_period_means(
    data: &PanelDataset,
    columns: &[&str],
    pre_years: &[i32],
) -> Result<PanelDataset> {
    if pre_years.is_empty() {
        return Err(Error::config("pre-policy window is empty".to_string()));
    }
    let cols: Vec<&[Option<f64>]> =
        columns.iter().map(|c| data.column(c)).collect::<Result<_>>()?;
    let years = data.years();
    let final_year = *pre_years.iter().max().unwrap();

    let mut builder = PanelBuilder::default();
    let mut sums: Vec<Vec<f64>> = vec![Vec::new(); columns.len()];
    for (code, range) in data.firm_blocks() {
        let rows: Vec<usize> = range
            .filter(|&i| pre_years.contains(&years[i]) && cols.iter().all(|c| c[i].is_some()))
            .collect();
        if rows.is_empty() {
            continue;
        }
        builder.firms.push(data.firm_label(code).to_string());
        builder.years.push(final_year);
        let ind = data.industry_codes()[rows[0]];
        let prov = data.province_codes()[rows[0]];
        builder.industries.push(data.industry_label(ind).to_string());
        builder.provinces.push(data.province_label(prov).to_string());
        for (k, c) in cols.iter().enumerate() {
            let vals: Vec<f64> = rows.iter().map(|&i| c[i].unwrap()).collect();
            sums[k].push(stats::mean(&vals)?);
        }
    }
    if builder.firms.is_empty() {
        return Err(Error::data("no firm has a complete pre-policy observation".to_string()));
    }
    for (k, name) in columns.iter().enumerate() {
        builder
            .columns
            .push((name.to_string(), std::mem::take(&mut sums[k]).into_iter().map(Some).collect()));
    }
    builder.build()
}

/// Map firm-level weights onto every row of a panel, matching by firm label.
///
/// Firms absent from the weighted dataset get weight 0 (they were not part
/// of the matched design).
pub fn firm_weights_to_rows(
    firm_data: &PanelDataset,
    weights: &[f64],
    panel: &PanelDataset,
) -> Result<Vec<f64>> {
    if weights.len() != firm_data.n_rows() {
        return Err(Error::data(format!(
            "{} weights for {} firm rows",
            weights.len(),
            firm_data.n_rows()
        )));
    }
    let mut by_label = std::collections::HashMap::new();
    let codes = firm_data.firm_codes();
    for (i, &w) in weights.iter().enumerate() {
        by_label.insert(firm_data.firm_label(codes[i]).to_string(), w);
    }
    Ok(panel
        .firm_codes()
        .iter()
        .map(|&c| by_label.get(panel.firm_label(c)).copied().unwrap_or(0.0))
        .collect())
}

fn standardized_bias(
    t_vals: &[f64],
    c_vals: &[f64],
    t_w: Option<&[f64]>,
    c_w: Option<&[f64]>,
) -> Result<f64> {
    let var_t = stats::sample_variance(t_vals)?;
    let var_c = stats::sample_variance(c_vals)?;
    let pooled = ((var_t + var_c) / 2.0).sqrt();
    if pooled <= 0.0 {
        return Err(Error::data("zero pooled variance in a balance covariate".to_string()));
    }
    let mean_t = match t_w {
        Some(w) => stats::weighted_mean(t_vals, w)?,
        None => stats::mean(t_vals)?,
    };
    let mean_c = match c_w {
        Some(w) => stats::weighted_mean(c_vals, w)?,
        None => stats::mean(c_vals)?,
    };
    Ok(100.0 * (mean_t - mean_c) / pooled)
}

/// Standardized bias per covariate, before and optionally after weighting.
pub fn balance_diagnostics(
    data: &PanelDataset,
    treat: &str,
    covars: &[&str],
    weights: Option<&[f64]>,
) -> Result<Vec<BalanceRow>> {
    let mut needed = vec![treat];
    needed.extend_from_slice(covars);
    let rows = data.complete_rows(&needed)?;
    let t = data.dense_at(treat, &rows)?;
    if let Some(w) = weights {
        if w.len() != data.n_rows() {
            return Err(Error::data(format!(
                "{} weights for {} panel rows",
                w.len(),
                data.n_rows()
            )));
        }
    }

    let mut out = Vec::with_capacity(covars.len());
    for name in covars {
        let x = data.dense_at(name, &rows)?;
        let (mut tx, mut cx, mut tw, mut cw) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (j, &i) in rows.iter().enumerate() {
            let w = weights.map_or(1.0, |w| w[i]);
            if t[j] == 1.0 {
                tx.push(x[j]);
                tw.push(w);
            } else {
                cx.push(x[j]);
                cw.push(w);
            }
        }
        if tx.is_empty() || cx.is_empty() {
            return Err(Error::data("balance needs both treated and control rows".to_string()));
        }
        let before = standardized_bias(&tx, &cx, None, None)?;
        let after = if weights.is_some() {
            standardized_bias(&tx, &cx, Some(&tw), Some(&cw))?
        } else {
            before
        };
        out.push(BalanceRow { covariate: name.to_string(), before, after });
    }
    Ok(out)
}

/// 1:k nearest-neighbor propensity-score matching with replacement.
///
/// Scores come from a logit of the treatment on the covariates; each
/// treated unit is matched to its `k` nearest controls by absolute score
/// distance within the caliper (on the probability scale). Matched treated
/// units get weight 1 and each of their controls accumulates `1/k`, so
/// control weights are integer multiples of `1/k`; a treated unit with
/// fewer than `k` in-caliper neighbors stays unmatched (weight 0) and is
/// counted. Distance ties resolve to the lower firm code, then row order,
/// making the match deterministic; `_seed` is accepted for interface
/// stability but no step is randomized.
pub fn psm_match(
    data: &PanelDataset,
    treat: &str,
    covars: &[&str],
    k: usize,
    caliper: f64,
    _seed: u64,
) -> Result<WeightVector> {
    if k == 0 {
        return Err(Error::config("k must be at least 1".to_string()));
    }
    if caliper < 0.0 {
        return Err(Error::config("caliper must be non-negative".to_string()));
    }
    let mut needed = vec![treat];
    needed.extend_from_slice(covars);
    let rows = data.complete_rows(&needed)?;
    let t = data.dense_at(treat, &rows)?;
    if t.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::data(format!("treatment column `{treat}` must be 0/1")));
    }

    let mut x = Vec::with_capacity(covars.len());
    for name in covars {
        x.push((name.to_string(), data.dense_at(name, &rows)?));
    }
    let cluster: Vec<usize> = (0..rows.len()).collect();
    let fit = binary_mle(&t, &x, Link::Logit, &cluster)?;
    let matrix: Vec<Vec<f64>> = x.iter().map(|(_, c)| c.clone()).collect();
    let scores = fit.predict_prob(&matrix)?;

    let firms = data.firm_codes();
    let treated_idx: Vec<usize> = (0..rows.len()).filter(|&j| t[j] == 1.0).collect();
    let control_idx: Vec<usize> = (0..rows.len()).filter(|&j| t[j] == 0.0).collect();
    if treated_idx.is_empty() || control_idx.is_empty() {
        return Err(Error::data("matching needs both treated and control units".to_string()));
    }

    let mut weights = vec![0.0; data.n_rows()];
    let mut unmatched = 0usize;
    for &tj in &treated_idx {
        let mut candidates: Vec<(f64, usize, usize)> = control_idx
            .iter()
            .map(|&cj| ((scores[cj] - scores[tj]).abs(), firms[rows[cj]], cj))
            .filter(|&(d, _, _)| d <= caliper)
            .collect();
        if candidates.len() < k {
            unmatched += 1;
            continue;
        }
        candidates.sort_by(|a, b| {
            a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
        });
        weights[rows[tj]] = 1.0;
        for &(_, _, cj) in candidates.iter().take(k) {
            weights[rows[cj]] += 1.0 / k as f64;
        }
    }
    if unmatched == treated_idx.len() {
        return Err(Error::estimation(
            "no treated unit has enough in-caliper neighbors".to_string(),
        ));
    }

    let diagnostics = balance_diagnostics(data, treat, covars, Some(&weights))?;
    Ok(WeightVector {
        weights,
        method: WeightMethod::Psm,
        diagnostics,
        unmatched_treated: unmatched,
        defaulted_firms: Vec::new(),
    })
}

/// Entropy-balancing weights over one sample.
///
/// Control weights minimize the Kullback-Leibler divergence from uniform
/// subject to the weighted control covariate means equaling the treated
/// means exactly; the dual is solved by Newton iteration on the tilt
/// coefficients (weights proportional to `exp(lambda' x)`), declaring
/// convergence when every moment gap is below `tol`. Weights are scaled to
/// sum to the treated count; treated rows get weight 1.
pub fn entropy_balance(
    data: &PanelDataset,
    treat: &str,
    covars: &[&str],
    tol: f64,
) -> Result<WeightVector> {
    let mut needed = vec![treat];
    needed.extend_from_slice(covars);
    let rows = data.complete_rows(&needed)?;
    let t = data.dense_at(treat, &rows)?;
    let mut x = Vec::with_capacity(covars.len());
    for name in covars {
        x.push(data.dense_at(name, &rows)?);
    }

    let treated: Vec<usize> = (0..rows.len()).filter(|&j| t[j] == 1.0).collect();
    let controls: Vec<usize> = (0..rows.len()).filter(|&j| t[j] == 0.0).collect();
    let control_w = solve_entropy_weights(&x, &treated, &controls, covars, tol)?;

    let mut weights = vec![0.0; data.n_rows()];
    for &j in &treated {
        weights[rows[j]] = 1.0;
    }
    for (&j, &w) in controls.iter().zip(&control_w) {
        weights[rows[j]] = w * treated.len() as f64;
    }
    let diagnostics = balance_diagnostics(data, treat, covars, Some(&weights))?;
    Ok(WeightVector {
        weights,
        method: WeightMethod::Eb,
        diagnostics,
        unmatched_treated: 0,
        defaulted_firms: Vec::new(),
    })
}

/// Newton solve of the entropy-balancing dual. Returns per-control weights
/// that sum to one.
fn solve_entropy_weights(
    x: &[Vec<f64>],
    treated: &[usize],
    controls: &[usize],
    covar_names: &[&str],
    tol: f64,
) -> Result<Vec<f64>> {
    if treated.is_empty() || controls.is_empty() {
        return Err(Error::data("balancing needs both treated and control units".to_string()));
    }
    if tol <= 0.0 {
        return Err(Error::config("tolerance must be positive".to_string()));
    }
    let nc = controls.len();
    let k_all = x.len();

    // Treated means and feasibility: each target must lie inside the
    // control support.
    let mut targets = Vec::with_capacity(k_all);
    for (k, col) in x.iter().enumerate() {
        let tvals: Vec<f64> = treated.iter().map(|&j| col[j]).collect();
        let target = stats::mean(&tvals)?;
        let lo = controls.iter().map(|&j| col[j]).fold(f64::INFINITY, f64::min);
        let hi = controls.iter().map(|&j| col[j]).fold(f64::NEG_INFINITY, f64::max);
        if target < lo - 1e-12 || target > hi + 1e-12 {
            return Err(Error::estimation(format!(
                "infeasible balance constraint: treated mean {target:.6} of `{}` lies outside \
                 the control range [{lo:.6}, {hi:.6}]",
                covar_names[k]
            )));
        }
        targets.push(target);
    }

    // Centered control design; constant columns leave the Newton system
    // (their gap is fixed at zero by feasibility above).
    let mut active = Vec::new();
    let mut xc: Vec<Vec<f64>> = Vec::new();
    for (k, col) in x.iter().enumerate() {
        let centered: Vec<f64> = controls.iter().map(|&j| col[j] - targets[k]).collect();
        let spread = centered.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        if spread > 1e-12 {
            active.push(k);
            xc.push(centered);
        } else if centered.iter().any(|&v| v.abs() > tol) {
            return Err(Error::estimation(format!(
                "infeasible balance constraint: `{}` is constant among controls away from \
                 the treated mean",
                covar_names[k]
            )));
        }
    }
    let ka = active.len();
    let mut lambda = DVector::zeros(ka);
    let mut p = vec![1.0 / nc as f64; nc];

    let max_iter = 200;
    let mut converged = false;
    for _ in 0..max_iter {
        // Stable softmax weights for the current tilt.
        let eta: Vec<f64> = (0..nc)
            .map(|i| (0..ka).map(|a| lambda[a] * xc[a][i]).sum::<f64>())
            .collect();
        let m = eta.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for (pi, &e) in p.iter_mut().zip(&eta) {
            *pi = (e - m).exp();
            z += *pi;
        }
        for pi in &mut p {
            *pi /= z;
        }

        // Moment gaps of the active covariates.
        let gap = DVector::from_fn(ka, |a, _| {
            (0..nc).map(|i| p[i] * xc[a][i]).sum::<f64>()
        });
        if (0..ka).all(|a| gap[a].abs() < tol) {
            converged = true;
            break;
        }

        // Newton step on the dual: Hessian is the weighted covariance.
        let mut hess = DMatrix::zeros(ka, ka);
        for a in 0..ka {
            for b in 0..=a {
                let mut s = 0.0;
                for i in 0..nc {
                    s += p[i] * xc[a][i] * xc[b][i];
                }
                s -= gap[a] * gap[b];
                hess[(a, b)] = s;
                hess[(b, a)] = s;
            }
        }
        for a in 0..ka {
            hess[(a, a)] += 1e-12;
        }
        let step = hess
            .cholesky()
            .map(|c| c.solve(&gap))
            .ok_or_else(|| Error::estimation("balancing Hessian is singular".to_string()))?;
        lambda -= step;
    }
    if !converged {
        return Err(Error::estimation(format!(
            "entropy balancing did not converge in {max_iter} Newton iterations"
        )));
    }

    // Verify every constraint, including covariates outside the Newton
    // system, against the tolerance.
    for (k, col) in x.iter().enumerate() {
        let wm: f64 = controls.iter().zip(&p).map(|(&j, &pi)| pi * col[j]).sum();
        if (wm - targets[k]).abs() >= tol {
            return Err(Error::estimation(format!(
                "balance constraint on `{}` not met: gap {:.3e}",
                covar_names[k],
                (wm - targets[k]).abs()
            )));
        }
    }
    Ok(p)
}

/// Entropy balancing solved per pre-policy year, emitting each firm's mean
/// weight applied to all of its rows in the full panel.
///
/// Treated firms carry weight 1 in every year they appear. Firms that never
/// enter a yearly balancing sample get the default weight 1 and are listed
/// in `defaulted_firms` so the caller can report them.
pub fn entropy_balance_yearly(
    data: &PanelDataset,
    treat: &str,
    covars: &[&str],
    pre_years: &[i32],
    tol: f64,
) -> Result<WeightVector> {
    if pre_years.is_empty() {
        return Err(Error::config("pre-policy window is empty".to_string()));
    }
    let mut needed = vec![treat];
    needed.extend_from_slice(covars);
    let rows_all = data.complete_rows(&needed)?;
    let years = data.years();
    let firms = data.firm_codes();

    let mut sums: Vec<(f64, f64)> = vec![(0.0, 0.0); data.n_firms()];
    for &year in pre_years {
        let rows: Vec<usize> = rows_all.iter().copied().filter(|&i| years[i] == year).collect();
        if rows.is_empty() {
            continue;
        }
        let t = data.dense_at(treat, &rows)?;
        let mut x = Vec::with_capacity(covars.len());
        for name in covars {
            x.push(data.dense_at(name, &rows)?);
        }
        let treated: Vec<usize> = (0..rows.len()).filter(|&j| t[j] == 1.0).collect();
        let controls: Vec<usize> = (0..rows.len()).filter(|&j| t[j] == 0.0).collect();
        if treated.is_empty() || controls.is_empty() {
            continue;
        }
        let control_w = solve_entropy_weights(&x, &treated, &controls, covars, tol)?;
        for &j in &treated {
            let f = firms[rows[j]];
            sums[f] = (sums[f].0 + 1.0, sums[f].1 + 1.0);
        }
        for (&j, &w) in controls.iter().zip(&control_w) {
            let f = firms[rows[j]];
            sums[f] = (sums[f].0 + w * treated.len() as f64, sums[f].1 + 1.0);
        }
    }

    let mut firm_weight = vec![1.0; data.n_firms()];
    let mut defaulted = Vec::new();
    for code in 0..data.n_firms() {
        let (s, n) = sums[code];
        if n > 0.0 {
            firm_weight[code] = s / n;
        } else {
            defaulted.push(data.firm_label(code).to_string());
        }
    }
    if defaulted.len() == data.n_firms() {
        return Err(Error::data("no year produced a balancing sample".to_string()));
    }

    let weights: Vec<f64> = firms.iter().map(|&f| firm_weight[f]).collect();
    let diagnostics = balance_diagnostics(data, treat, covars, Some(&weights))?;
    Ok(WeightVector {
        weights,
        method: WeightMethod::Eb,
        diagnostics,
        unmatched_treated: 0,
        defaulted_firms: defaulted,
    })
}
