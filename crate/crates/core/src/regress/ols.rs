//! Least squares with absorbed fixed effects and cluster-robust inference.
//!
//! The estimator demeans outcome and regressors with [`Absorber`], solves the
//! normal equations on the surviving (non-collinear) columns, and builds the
//! CR1 cluster sandwich. Collinear columns are detected with a pivoted
//! Cholesky factorization of the normalized Gram matrix and dropped with a
//! record, mirroring standard econometric software behavior.
//!
//! # References
//!
//! - Cameron & Miller (2015), "A practitioner's guide to cluster-robust
//!   inference" (CR1 small-sample factor).
//! - Davidson & MacKinnon (2004), ch. 2 (Frisch–Waugh–Lovell).

use nalgebra::{Cholesky, DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::stats;

use super::absorb::{drop_singletons, Absorber, ResolvedEffects};

/// One estimated coefficient with cluster-robust inference.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Coefficient {
    /// Regressor name.
    pub name: String,
    /// Point estimate.
    pub estimate: f64,
    /// Cluster-robust standard error.
    pub se: f64,
    /// t statistic.
    pub t: f64,
    /// Two-sided p-value on t with (clusters - 1) degrees of freedom.
    pub p: f64,
}

/// Fitted regression with absorbed fixed effects.
///
/// Serialization covers the reporting surface (coefficient table and fit
/// block); the covariance matrix and per-row vectors stay in memory only.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RegressionResult {
    /// Kept coefficients, in input order.
    pub coefficients: Vec<Coefficient>,
    /// Cluster-robust covariance of the kept coefficients (same order).
    #[serde(skip)]
    pub vcov: DMatrix<f64>,
    /// Residuals, aligned with `used_rows`.
    #[serde(skip)]
    pub residuals: Vec<f64>,
    /// Indices into the input rows that survived singleton dropping.
    #[serde(skip)]
    pub used_rows: Vec<usize>,
    /// Observations used.
    pub n_obs: usize,
    /// Clusters present in the used sample.
    pub n_clusters: usize,
    /// R-squared including the absorbed effects.
    pub r2: f64,
    /// Adjusted R-squared (absorbed effects counted in the dof).
    pub adj_r2: f64,
    /// Degrees of freedom absorbed by the fixed effects.
    pub df_absorbed: usize,
    /// Rows dropped as fixed-effect singletons.
    pub dropped_singletons: usize,
    /// Regressors dropped as collinear (with the absorbed effects or each other).
    pub dropped_collinear: Vec<String>,
    /// True when the fit used observation weights.
    pub weighted: bool,
}

impl RegressionResult {
    /// Look up a coefficient by name. Collinear-dropped names are an error.
    pub fn coefficient(&self, name: &str) -> Result<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name).ok_or_else(|| {
            if self.dropped_collinear.iter().any(|d| d == name) {
                Error::estimation(format!("regressor `{name}` was dropped as collinear"))
            } else {
                Error::config(format!("no coefficient named `{name}`"))
            }
        })
    }

    /// 95% confidence interval using t with (clusters - 1) degrees of freedom.
    pub fn ci95(&self, name: &str) -> Result<(f64, f64)> {
        let c = self.coefficient(name)?;
        let crit = t_critical_975(self.n_clusters.saturating_sub(1))?;
        Ok((c.estimate - crit * c.se, c.estimate + crit * c.se))
    }
}

/// Two-sided 95% critical value of the t distribution.
fn t_critical_975(df: usize) -> Result<f64> {
    if df == 0 {
        return Err(Error::estimation("confidence interval needs at least 2 clusters".to_string()));
    }
    let dist = StudentsT::new(0.0, 1.0, df as f64)
        .map_err(|e| Error::estimation(format!("t distribution: {e}")))?;
    Ok(dist.inverse_cdf(0.975))
}

/// Detect the numerically independent columns by pivoted Cholesky on the
/// norm-scaled Gram matrix. Returns (kept, dropped) index lists in input
/// order. Columns with (weighted) norm ~ 0 are dropped outright.
pub(crate) fn detect_independent_columns(
    cols: &[Vec<f64>],
    weights: Option<&[f64]>,
    rel_tol: f64,
) -> (Vec<usize>, Vec<usize>) {
    let k = cols.len();
    let mut kept = Vec::with_capacity(k);
    let mut dropped = Vec::new();

    let dot = |a: usize, b: usize| -> f64 {
        match weights {
            Some(w) => cols[a].iter().zip(&cols[b]).zip(w).map(|((x, y), wi)| wi * x * y).sum(),
            None => cols[a].iter().zip(&cols[b]).map(|(x, y)| x * y).sum(),
        }
    };

    let norms: Vec<f64> = (0..k).map(|j| dot(j, j).sqrt()).collect();
    let live: Vec<usize> = (0..k)
        .filter(|&j| {
            if norms[j] > 1e-14 * (cols[j].len() as f64).sqrt().max(1.0) {
                true
            } else {
                dropped.push(j);
                false
            }
        })
        .collect();

    // Gram matrix of the norm-scaled live columns; diagonal starts at 1.
    let m = live.len();
    let mut gram = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in a..m {
            let v = dot(live[a], live[b]) / (norms[live[a]] * norms[live[b]]);
            gram[(a, b)] = v;
            gram[(b, a)] = v;
        }
    }

    // In-order Cholesky sweep: a column is kept when its residual diagonal
    // after projecting on the columns already kept stays above tolerance.
    // Processing in input order means later-listed collinear regressors are
    // the ones dropped, matching standard econometric software.
    let mut l = DMatrix::<f64>::zeros(m, m);
    let mut diag: Vec<f64> = (0..m).map(|a| gram[(a, a)]).collect();
    let mut accepted: Vec<usize> = Vec::new();
    for j in 0..m {
        if diag[j] <= rel_tol {
            dropped.push(live[j]);
            continue;
        }
        let step = accepted.len();
        let pivot = diag[j].sqrt();
        l[(j, step)] = pivot;
        for i in (j + 1)..m {
            let mut v = gram[(j, i)];
            for s in 0..step {
                v -= l[(j, s)] * l[(i, s)];
            }
            let v = v / pivot;
            l[(i, step)] = v;
            diag[i] = (diag[i] - v * v).max(0.0);
        }
        accepted.push(j);
    }
    kept.extend(accepted.iter().map(|&a| live[a]));
    kept.sort_unstable();
    dropped.sort_unstable();
    (kept, dropped)
}

/// Ordinary (or weighted) least squares of `y` on named columns `x` with all
/// dimensions of `effects` absorbed and standard errors clustered on
/// `cluster` codes.
///
/// Rows that are fixed-effect singletons are dropped first (recursively) and
/// counted; collinear regressors are dropped and named in the result. The
/// small-sample factor is CR1 = (G/(G-1)) * ((N-1)/(N-K)) with K counting the
/// kept regressors plus the absorbed degrees of freedom.
pub fn ols_cluster(
    y: &[f64],
    x: &[(String, Vec<f64>)],
    effects: &ResolvedEffects,
    cluster: &[usize],
    weights: Option<&[f64]>,
) -> Result<RegressionResult> {
    let n = y.len();
    if n == 0 {
        return Err(Error::data("regression on an empty sample".to_string()));
    }
    if x.is_empty() {
        return Err(Error::config("regression needs at least one regressor".to_string()));
    }
    if cluster.len() != n || effects.n_rows() != n {
        return Err(Error::config(format!(
            "length mismatch: {} outcomes, {} cluster codes, {} fixed-effect rows",
            n,
            cluster.len(),
            effects.n_rows()
        )));
    }
    for (name, col) in x {
        if col.len() != n {
            return Err(Error::config(format!(
                "regressor `{name}` has {} values for {n} rows",
                col.len()
            )));
        }
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::config(format!("{} weights for {n} rows", w.len())));
        }
    }

    // Work on the positive-weight subsample: zero-weight rows carry no
    // information and would otherwise distort singleton detection.
    let positive: Vec<usize> = match weights {
        Some(w) => (0..n).filter(|&i| w[i] > 0.0).collect(),
        None => (0..n).collect(),
    };
    if positive.is_empty() {
        return Err(Error::data("all observation weights are zero".to_string()));
    }
    let fx_positive = if positive.len() == n { effects.clone() } else { effects.subset(&positive) };

    let (kept_local, dropped_singletons) = drop_singletons(&fx_positive);
    if kept_local.is_empty() {
        return Err(Error::data("every row is a fixed-effect singleton".to_string()));
    }
    let used_rows: Vec<usize> = kept_local.iter().map(|&i| positive[i]).collect();
    let fx = fx_positive.subset(&kept_local);
    let m = used_rows.len();

    let w_used: Option<Vec<f64>> =
        weights.map(|w| used_rows.iter().map(|&i| w[i]).collect());
    let y_used: Vec<f64> = used_rows.iter().map(|&i| y[i]).collect();

    // Absorb the fixed effects from outcome and regressors jointly.
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(x.len() + 1);
    cols.push(y_used.clone());
    for (_, col) in x {
        cols.push(used_rows.iter().map(|&i| col[i]).collect());
    }
    let absorber = Absorber::new(&fx, w_used.as_deref())?;
    absorber.partial_out(&mut cols)?;
    let y_dm = cols.remove(0);
    let x_dm = cols;

    // Outcome must retain variation after absorption.
    let wdot = |a: &[f64], b: &[f64]| -> f64 {
        match &w_used {
            Some(w) => a.iter().zip(b).zip(w).map(|((p, q), wi)| wi * p * q).sum(),
            None => a.iter().zip(b).map(|(p, q)| p * q).sum(),
        }
    };
    let y_scale = y_used.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    if wdot(&y_dm, &y_dm) <= (1e-12 * y_scale).powi(2) * m as f64 {
        return Err(Error::estimation(
            "outcome has no variation after absorbing fixed effects".to_string(),
        ));
    }

    let (kept_x, dropped_x) = detect_independent_columns(&x_dm, w_used.as_deref(), 1e-10);
    if kept_x.is_empty() {
        return Err(Error::estimation(
            "all regressors are collinear with the fixed effects".to_string(),
        ));
    }
    let dropped_collinear: Vec<String> = dropped_x.iter().map(|&j| x[j].0.clone()).collect();
    let k = kept_x.len();

    // Normal equations on the kept columns.
    let mut xtx = DMatrix::zeros(k, k);
    let mut xty = DVector::zeros(k);
    for a in 0..k {
        for b in a..k {
            let v = wdot(&x_dm[kept_x[a]], &x_dm[kept_x[b]]);
            xtx[(a, b)] = v;
            xtx[(b, a)] = v;
        }
        xty[a] = wdot(&x_dm[kept_x[a]], &y_dm);
    }
    let chol = Cholesky::new(xtx.clone())
        .ok_or_else(|| Error::estimation("normal equations are singular".to_string()))?;
    let beta = chol.solve(&xty);
    let xtx_inv = chol.inverse();

    // Residuals on the demeaned data (identical to full-model residuals).
    let mut residuals = y_dm.clone();
    for (a, &j) in kept_x.iter().enumerate() {
        let b = beta[a];
        for (r, xv) in residuals.iter_mut().zip(&x_dm[j]) {
            *r -= b * xv;
        }
    }

    // Cluster bookkeeping on the used sample.
    let cluster_used: Vec<usize> = used_rows.iter().map(|&i| cluster[i]).collect();
    let mut cluster_ids: Vec<usize> = cluster_used.clone();
    cluster_ids.sort_unstable();
    cluster_ids.dedup();
    let g = cluster_ids.len();
    if g < 2 {
        return Err(Error::data(format!(
            "cluster-robust inference needs at least 2 clusters, found {g}"
        )));
    }
    let cluster_pos: std::collections::HashMap<usize, usize> =
        cluster_ids.iter().enumerate().map(|(p, &c)| (c, p)).collect();

    let df_absorbed = fx.df_absorbed();
    let k_eff = k + df_absorbed;
    if m <= k_eff {
        return Err(Error::estimation(format!(
            "insufficient degrees of freedom: {m} observations for {k_eff} parameters"
        )));
    }

    // Cluster scores and the CR1 sandwich.
    let mut scores = DMatrix::zeros(g, k);
    for i in 0..m {
        let wi = w_used.as_ref().map_or(1.0, |w| w[i]);
        let gi = cluster_pos[&cluster_used[i]];
        let r = wi * residuals[i];
        for (a, &j) in kept_x.iter().enumerate() {
            scores[(gi, a)] += r * x_dm[j][i];
        }
    }
    let meat = scores.transpose() * &scores;
    let cr1 = (g as f64 / (g as f64 - 1.0)) * ((m as f64 - 1.0) / (m as f64 - k_eff as f64));
    let mut vcov = &xtx_inv * meat * &xtx_inv * cr1;
    // Enforce exact symmetry lost to floating-point accumulation.
    for a in 0..k {
        for b in (a + 1)..k {
            let v = 0.5 * (vcov[(a, b)] + vcov[(b, a)]);
            vcov[(a, b)] = v;
            vcov[(b, a)] = v;
        }
    }

    // R-squared against the (weighted) mean of the original outcome.
    let y_mean = match &w_used {
        Some(w) => stats::weighted_mean(&y_used, w)?,
        None => stats::mean(&y_used)?,
    };
    let centered: Vec<f64> = y_used.iter().map(|v| v - y_mean).collect();
    let tss = wdot(&centered, &centered);
    let rss = wdot(&residuals, &residuals);
    let r2 = if tss > 0.0 { 1.0 - rss / tss } else { 0.0 };
    let adj_r2 = 1.0 - (1.0 - r2) * (m as f64 - 1.0) / (m as f64 - k_eff as f64);

    let df_t = (g - 1) as f64;
    let coefficients: Vec<Coefficient> = (0..k)
        .map(|a| {
            let se = vcov[(a, a)].max(0.0).sqrt();
            let t = if se > 0.0 { beta[a] / se } else { f64::INFINITY };
            Ok(Coefficient {
                name: x[kept_x[a]].0.clone(),
                estimate: beta[a],
                se,
                t,
                p: stats::t_p_two_sided(t, df_t)?,
            })
        })
        .collect::<Result<_>>()?;

    Ok(RegressionResult {
        coefficients,
        vcov,
        residuals,
        used_rows,
        n_obs: m,
        n_clusters: g,
        r2,
        adj_r2,
        df_absorbed,
        dropped_singletons,
        dropped_collinear,
        weighted: weights.is_some(),
    })
}
