//! Construction of the disclosure-decoupling measure.
//!
//! The measure isolates the component of a firm's narrative AI disclosure
//! that is not explained by its substantive AI activity: annual
//! cross-sections regress the disclosure word measure on the patent
//! measure, firm controls, and industry fixed effects, and the residual is
//! the decoupling signal. This module derives everything downstream of that
//! residual — treatment labels under three assignment rules, continuous and
//! quantile intensity encodings, the standardized word-minus-patent
//! difference, and year-over-year persistence diagnostics.
//!
//! # References
//!
//! - Wooldridge, J. M. (2010). *Econometric Analysis of Cross Section and
//!   Panel Data* (2nd ed.). MIT Press. (Residual-based two-step measures.)

use serde::Serialize;

use crate::error::{Error, Result};
use crate::panel::PanelDataset;
use crate::regress::{Absorber, ResolvedEffects};
use crate::stats;

/// Which patent measure anchors the substantive-activity side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PatentMode {
    /// Annual grant flow (`AIPatent` as-is) — the baseline.
    Flow,
    /// Within-firm cumulative sum of the flow up to each year.
    Stock,
    /// Patent applications (`AIPatentApp`) instead of grants.
    Application,
}

/// Inputs of the annual decoupling regressions.
#[derive(Debug, Clone)]
pub struct DecouplingSpec {
    /// Disclosure word-measure column.
    pub word: String,
    /// Patent measure variant.
    pub patent_mode: PatentMode,
    /// Firm-control columns entering each cross-section.
    pub controls: Vec<String>,
    /// Years whose cross-sections are fit (the pre-policy window).
    pub pre_years: Vec<i32>,
}

impl DecouplingSpec {
    /// Baseline spec: word on patent flow plus the standard firm controls.
    pub fn new(pre_years: Vec<i32>) -> DecouplingSpec {
        DecouplingSpec {
            word: "AIWord".to_string(),
            patent_mode: PatentMode::Flow,
            controls: ["Size", "Lev", "ROA", "Liquid", "Top5", "TobinQ", "ListAge"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            pre_years,
        }
    }

    fn patent_source(&self) -> &'static str {
        match self.patent_mode {
            PatentMode::Flow | PatentMode::Stock => "AIPatent",
            PatentMode::Application => "AIPatentApp",
        }
    }
}

/// Patent column per the mode: raw flow, within-firm cumulative stock, or
/// the application series.
fn patent_values(data: &PanelDataset, spec: &DecouplingSpec) -> Result<Vec<Option<f64>>> {
    let raw = data.column(spec.patent_source())?;
    match spec.patent_mode {
        PatentMode::Flow | PatentMode::Application => Ok(raw.to_vec()),
        PatentMode::Stock => {
            let mut out = raw.to_vec();
            for (_, range) in data.firm_blocks() {
                let mut acc = 0.0;
                for i in range {
                    if let Some(v) = raw[i] {
                        acc += v;
                        out[i] = Some(acc);
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Per-observation decoupling residuals from annual cross-sections.
///
/// For each year in `spec.pre_years`, regresses the word measure on the
/// patent measure, the controls, and industry fixed effects over that
/// year's complete observations; the fitted residuals are written back at
/// the original row positions. Rows outside the window, or with a missing
/// input, stay missing. Singleton industry cells are retained with an
/// exact-zero residual (their fixed effect saturates the observation), so
/// residuals sum to zero within every industry-year cell.
pub fn decoupling_residuals(
    data: &PanelDataset,
    spec: &DecouplingSpec,
) -> Result<Vec<Option<f64>>> {
    let word = data.column(&spec.word)?;
    let patent = patent_values(data, spec)?;
    let controls: Vec<&[Option<f64>]> =
        spec.controls.iter().map(|c| data.column(c)).collect::<Result<_>>()?;
    let years = data.years();
    let industry = data.industry_codes();

    let mut out: Vec<Option<f64>> = vec![None; data.n_rows()];
    for &year in &spec.pre_years {
        let rows: Vec<usize> = (0..data.n_rows())
            .filter(|&i| {
                years[i] == year
                    && word[i].is_some()
                    && patent[i].is_some()
                    && controls.iter().all(|c| c[i].is_some())
            })
            .collect();
        let m = rows.len();
        let n_params = 2 + spec.controls.len(); // patent + controls + ≥1 industry level
        if m < n_params {
            return Err(Error::data(format!(
                "year {year}: {m} observations cannot identify {n_params}+ parameters"
            )));
        }

        let y: Vec<f64> = rows.iter().map(|&i| word[i].unwrap()).collect();
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(1 + controls.len());
        cols.push(rows.iter().map(|&i| patent[i].unwrap()).collect());
        for c in &controls {
            cols.push(rows.iter().map(|&i| c[i].unwrap()).collect());
        }

        let codes: Vec<usize> = rows.iter().map(|&i| industry[i]).collect();
        let effects = ResolvedEffects::from_codes(vec![codes], 1e-10, 10_000)?;
        let absorber = Absorber::new(&effects, None)?;
        let mut work = Vec::with_capacity(cols.len() + 1);
        work.push(y.clone());
        work.extend(cols.iter().cloned());
        absorber.partial_out(&mut work)?;
        let y_w = work.remove(0);
        let resid = within_residuals(&y_w, &work, m)?;
        for (r, &i) in resid.iter().zip(&rows) {
            out[i] = Some(*r);
        }
    }
    Ok(out)
}

/// Residuals of within-transformed `y` on within-transformed regressors,
/// dropping collinear columns. With one absorbed dimension the within
/// residual equals the full fixed-effects residual exactly.
fn within_residuals(y_w: &[f64], x_w: &[Vec<f64>], m: usize) -> Result<Vec<f64>> {
    use nalgebra::{DMatrix, DVector};
    let (kept, _) = crate::regress::detect_independent_columns(x_w, None, 1e-10);
    let k = kept.len();
    let mut resid = y_w.to_vec();
    if k == 0 {
        return Ok(resid);
    }
    let xm = DMatrix::from_fn(m, k, |i, j| x_w[kept[j]][i]);
    let yv = DVector::from_column_slice(y_w);
    let xtx = xm.transpose() * &xm;
    let xty = xm.transpose() * &yv;
    let chol = xtx
        .cholesky()
        .ok_or_else(|| Error::estimation("cross-section normal equations are singular".to_string()))?;
    let beta = chol.solve(&xty);
    let fitted = xm * beta;
    for i in 0..m {
        resid[i] -= fitted[i];
    }
    Ok(resid)
}

/// Treatment status under the strict all-years sign rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StrictStatus {
    /// Residual strictly positive in every pre-policy year.
    Treated,
    /// Residual non-positive in every pre-policy year.
    Control,
    /// Mixed signs, or not observed in every pre-policy year.
    Excluded,
}

/// Per-firm residual summary and treatment labels.
#[derive(Debug, Clone, Serialize)]
pub struct FirmAssignment {
    /// Firm label.
    pub firm: String,
    /// Firm code in the source panel.
    pub firm_code: usize,
    /// Observed (year, residual) pairs within the pre-policy window.
    pub residuals: Vec<(i32, f64)>,
    /// Mean residual over the observed pre-policy years.
    pub mean_residual: f64,
    /// Mean-rule label: mean residual strictly positive.
    pub treat_mean: bool,
    /// Strict-rule label.
    pub treat_strict: StrictStatus,
    /// Final-pre-year rule label; `None` when that year is unobserved.
    pub treat_single_year: Option<bool>,
}

/// Assignment table over all firms with at least one pre-policy residual.
#[derive(Debug, Clone, Serialize)]
pub struct AssignmentTable {
    /// One entry per assignable firm, in firm-code order.
    pub firms: Vec<FirmAssignment>,
    /// The pre-policy window the labels were built from.
    pub pre_years: Vec<i32>,
    /// Firms with no residual in the window, excluded from every rule.
    pub excluded_firms: Vec<String>,
}

/// Rule selecting one treatment column from an [`AssignmentTable`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentMode {
    /// Treated iff the pre-period mean residual is strictly positive.
    Mean,
    /// Treated/control only on uniform signs across all pre-policy years.
    Strict,
    /// Treated iff the final pre-policy year's residual is positive.
    SingleYear,
}

/// Label every firm from its pre-policy residuals.
///
/// The mean rule averages whichever window years the firm was observed in;
/// the strict rule demands an observation in *every* window year and
/// uniform signs (strictly positive for treated, non-positive for control);
/// the single-year rule uses only the final window year. A mean residual of
/// exactly zero is control under the mean rule (strict inequality).
pub fn assign_treatment(
    data: &PanelDataset,
    residuals: &[Option<f64>],
    pre_years: &[i32],
) -> Result<AssignmentTable> {
    if residuals.len() != data.n_rows() {
        return Err(Error::data(format!(
            "residual column has {} rows for a panel of {}",
            residuals.len(),
            data.n_rows()
        )));
    }
    if pre_years.is_empty() {
        return Err(Error::config("pre-policy window is empty".to_string()));
    }
    let final_year = *pre_years.iter().max().unwrap();
    let years = data.years();

    let mut firms = Vec::new();
    let mut excluded = Vec::new();
    for (code, range) in data.firm_blocks() {
        let mut series: Vec<(i32, f64)> = Vec::new();
        for i in range {
            if pre_years.contains(&years[i]) {
                if let Some(r) = residuals[i] {
                    series.push((years[i], r));
                }
            }
        }
        if series.is_empty() {
            excluded.push(data.firm_label(code).to_string());
            continue;
        }
        let mean = series.iter().map(|&(_, r)| r).sum::<f64>() / series.len() as f64;
        let strict = if series.len() < pre_years.len() {
            StrictStatus::Excluded
        } else if series.iter().all(|&(_, r)| r > 0.0) {
            StrictStatus::Treated
        } else if series.iter().all(|&(_, r)| r <= 0.0) {
            StrictStatus::Control
        } else {
            StrictStatus::Excluded
        };
        let single = series.iter().find(|&&(y, _)| y == final_year).map(|&(_, r)| r > 0.0);
        firms.push(FirmAssignment {
            firm: data.firm_label(code).to_string(),
            firm_code: code,
            residuals: series,
            mean_residual: mean,
            treat_mean: mean > 0.0,
            treat_strict: strict,
            treat_single_year: single,
        });
    }
    Ok(AssignmentTable { firms, pre_years: pre_years.to_vec(), excluded_firms: excluded })
}

impl AssignmentTable {
    /// Expand one rule into a per-row treatment column for the panel the
    /// table was built from. Firms the rule cannot label are missing.
    pub fn treatment_column(
        &self,
        data: &PanelDataset,
        mode: AssignmentMode,
    ) -> Result<Vec<Option<f64>>> {
        let mut by_code: Vec<Option<f64>> = vec![None; data.n_firms()];
        for fa in &self.firms {
            let label = match mode {
                AssignmentMode::Mean => Some(fa.treat_mean),
                AssignmentMode::Strict => match fa.treat_strict {
                    StrictStatus::Treated => Some(true),
                    StrictStatus::Control => Some(false),
                    StrictStatus::Excluded => None,
                },
                AssignmentMode::SingleYear => fa.treat_single_year,
            };
            by_code[fa.firm_code] = label.map(|t| if t { 1.0 } else { 0.0 });
        }
        Ok(data.firm_codes().iter().map(|&c| by_code[c]).collect())
    }
}

/// Continuous or grouped encoding of treatment intensity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityScheme {
    /// The pre-period mean residual itself.
    Raw,
    /// Mean residual standardized to sample mean 0, variance 1.
    Standardized,
    /// 1 = non-positive mean; 2/3 = positive means split at their median.
    MedianSplit,
    /// 1 = non-positive mean; 2–4 = rank terciles of the positive means.
    Terciles,
}

/// Encode per-firm intensity, aligned with `table.firms`.
///
/// Group codes are returned as small integers stored in `f64` so they can
/// interact directly in regressions. Rank splits are stable: ties are
/// resolved by firm-code order.
pub fn intensity_and_quantiles(
    table: &AssignmentTable,
    scheme: IntensityScheme,
) -> Result<Vec<f64>> {
    let means: Vec<f64> = table.firms.iter().map(|f| f.mean_residual).collect();
    if means.is_empty() {
        return Err(Error::data("assignment table has no firms".to_string()));
    }
    match scheme {
        IntensityScheme::Raw => Ok(means),
        IntensityScheme::Standardized => {
            let m = stats::mean(&means)?;
            let sd = stats::sample_sd(&means)?;
            if sd <= 1e-12 * m.abs().max(1.0) {
                return Err(Error::data(
                    "standardized intensity is undefined: zero variance across firms".to_string(),
                ));
            }
            Ok(means.iter().map(|v| (v - m) / sd).collect())
        }
        IntensityScheme::MedianSplit => {
            let positive: Vec<f64> = means.iter().copied().filter(|&v| v > 0.0).collect();
            if positive.is_empty() {
                return Err(Error::data("no positive mean residuals to split".to_string()));
            }
            let median = stats::quantile(&positive, 0.5)?;
            Ok(means
                .iter()
                .map(|&v| {
                    if v <= 0.0 {
                        1.0
                    } else if v <= median {
                        2.0
                    } else {
                        3.0
                    }
                })
                .collect())
        }
        IntensityScheme::Terciles => {
            let mut positive: Vec<usize> = (0..means.len()).filter(|&i| means[i] > 0.0).collect();
            if positive.len() < 3 {
                return Err(Error::data(format!(
                    "terciles need at least 3 positive-mean firms, found {}",
                    positive.len()
                )));
            }
            positive.sort_by(|&a, &b| {
                means[a]
                    .partial_cmp(&means[b])
                    .unwrap()
                    .then(table.firms[a].firm_code.cmp(&table.firms[b].firm_code))
            });
            let n = positive.len();
            let mut out = vec![1.0; means.len()];
            for (rank, &i) in positive.iter().enumerate() {
                out[i] = 2.0 + (rank * 3 / n) as f64;
            }
            Ok(out)
        }
    }
}

/// Industry-standardized disclosure and activity scores and their difference.
#[derive(Debug, Clone, Serialize)]
pub struct ZDifference {
    /// Word measure standardized within industry over the window.
    pub z_word: Vec<Option<f64>>,
    /// Patent measure standardized within industry over the window.
    pub z_patent: Vec<Option<f64>>,
    /// `z_word - z_patent`, exactly.
    pub z_diff: Vec<Option<f64>>,
    /// Industries with zero variance in either input; their rows stay missing.
    pub flagged_industries: Vec<String>,
}

/// Standardized word-minus-patent difference per firm-year.
///
/// Standardization pools each industry's observations over `pre_years`
/// (mean 0, sample SD 1 within that population). Rows outside the window
/// stay missing; an industry with zero variance in either measure is
/// flagged and its scores set missing rather than divided by zero.
pub fn z_difference(
    data: &PanelDataset,
    word: &str,
    patent: &str,
    pre_years: &[i32],
) -> Result<ZDifference> {
    let word_col = data.column(word)?;
    let patent_col = data.column(patent)?;
    let years = data.years();
    let industry = data.industry_codes();
    let n_ind = industry.iter().copied().max().map_or(0, |m| m + 1);

    let mut rows_by_ind: Vec<Vec<usize>> = vec![Vec::new(); n_ind];
    for i in 0..data.n_rows() {
        if pre_years.contains(&years[i]) && word_col[i].is_some() && patent_col[i].is_some() {
            rows_by_ind[industry[i]].push(i);
        }
    }

    let mut z_word = vec![None; data.n_rows()];
    let mut z_patent = vec![None; data.n_rows()];
    let mut z_diff = vec![None; data.n_rows()];
    let mut flagged = Vec::new();
    for (ind, rows) in rows_by_ind.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let ws: Vec<f64> = rows.iter().map(|&i| word_col[i].unwrap()).collect();
        let ps: Vec<f64> = rows.iter().map(|&i| patent_col[i].unwrap()).collect();
        let usable = rows.len() >= 2
            && stats::sample_sd(&ws).map(|s| s > 0.0).unwrap_or(false)
            && stats::sample_sd(&ps).map(|s| s > 0.0).unwrap_or(false);
        if !usable {
            flagged.push(data.industry_label(ind).to_string());
            continue;
        }
        let (wm, wsd) = (stats::mean(&ws)?, stats::sample_sd(&ws)?);
        let (pm, psd) = (stats::mean(&ps)?, stats::sample_sd(&ps)?);
        for &i in rows {
            let zw = (word_col[i].unwrap() - wm) / wsd;
            let zp = (patent_col[i].unwrap() - pm) / psd;
            z_word[i] = Some(zw);
            z_patent[i] = Some(zp);
            z_diff[i] = Some(zw - zp);
        }
    }
    Ok(ZDifference { z_word, z_patent, z_diff, flagged_industries: flagged })
}

/// Year-over-year persistence diagnostics of a residual column.
#[derive(Debug, Clone, Serialize)]
pub struct PersistenceStats {
    /// Row-normalized tercile transition probabilities (from-row, to-column).
    pub transition: [[f64; 3]; 3],
    /// Raw transition counts.
    pub counts: [[usize; 3]; 3],
    /// Spearman rank correlation of consecutive-year residuals, pooled.
    pub spearman: f64,
    /// Number of consecutive-year firm pairs.
    pub n_pairs: usize,
}

/// Tercile transition matrix and pooled rank correlation across consecutive
/// years.
///
/// Firms are ranked into terciles within each year (stable rank split, ties
/// by firm code; years with fewer than 3 observations are skipped), then
/// every within-firm pair of consecutive calendar years contributes one
/// transition and one (current, next) residual pair to the pooled Spearman
/// correlation.
pub fn persistence_stats(
    data: &PanelDataset,
    residuals: &[Option<f64>],
) -> Result<PersistenceStats> {
    if residuals.len() != data.n_rows() {
        return Err(Error::data(format!(
            "residual column has {} rows for a panel of {}",
            residuals.len(),
            data.n_rows()
        )));
    }
    let years = data.years();
    let firms = data.firm_codes();

    // Tercile label per row, by year.
    let mut label: Vec<Option<usize>> = vec![None; data.n_rows()];
    for &year in data.year_levels() {
        let mut rows: Vec<usize> = (0..data.n_rows())
            .filter(|&i| years[i] == year && residuals[i].is_some())
            .collect();
        let n = rows.len();
        if n < 3 {
            continue;
        }
        rows.sort_by(|&a, &b| {
            residuals[a]
                .unwrap()
                .partial_cmp(&residuals[b].unwrap())
                .unwrap()
                .then(firms[a].cmp(&firms[b]))
        });
        for (rank, &i) in rows.iter().enumerate() {
            label[i] = Some(rank * 3 / n);
        }
    }

    // Consecutive-year pairs within firm.
    let mut counts = [[0usize; 3]; 3];
    let mut current = Vec::new();
    let mut next = Vec::new();
    for i in 0..data.n_rows() {
        let (Some(from), Some(r0)) = (label[i], residuals[i]) else { continue };
        let Some(j) = next_index(data, i) else { continue };
        let (Some(to), Some(r1)) = (label[j], residuals[j]) else { continue };
        counts[from][to] += 1;
        current.push(r0);
        next.push(r1);
    }
    if current.is_empty() {
        return Err(Error::data("no consecutive-year residual pairs".to_string()));
    }

    let mut transition = [[0.0; 3]; 3];
    for r in 0..3 {
        let total: usize = counts[r].iter().sum();
        if total == 0 {
            return Err(Error::data(format!(
                "tercile {} has no outgoing transitions",
                r + 1
            )));
        }
        for c in 0..3 {
            transition[r][c] = counts[r][c] as f64 / total as f64;
        }
    }
    let rho = stats::spearman(&current, &next)?;
    Ok(PersistenceStats { transition, counts, spearman: rho, n_pairs: current.len() })
}

/// Row index of the same firm in the following calendar year, if observed.
fn next_index(data: &PanelDataset, i: usize) -> Option<usize> {
    let years = data.years();
    let firms = data.firm_codes();
    if i + 1 < data.n_rows() && firms[i + 1] == firms[i] && years[i + 1] == years[i] + 1 {
        Some(i + 1)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::PanelBuilder;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    /// Rows must already be sorted by (firm, year) so columns stay aligned.
    fn panel_from(rows: &[(&str, i32, &str)], cols: &[(&str, Vec<f64>)]) -> PanelDataset {
        PanelBuilder {
            firms: rows.iter().map(|r| r.0.to_string()).collect(),
            years: rows.iter().map(|r| r.1).collect(),
            industries: rows.iter().map(|r| r.2.to_string()).collect(),
            provinces: vec!["P1".to_string(); rows.len()],
            columns: cols
                .iter()
                .map(|(n, v)| (n.to_string(), v.iter().map(|&x| Some(x)).collect()))
                .collect(),
        }
        .build()
        .unwrap()
    }

    fn table_from_means(means: &[f64]) -> AssignmentTable {
        AssignmentTable {
            firms: means
                .iter()
                .enumerate()
                .map(|(i, &m)| FirmAssignment {
                    firm: format!("F{i:03}"),
                    firm_code: i,
                    residuals: vec![(2020, m)],
                    mean_residual: m,
                    treat_mean: m > 0.0,
                    treat_strict: if m > 0.0 { StrictStatus::Treated } else { StrictStatus::Control },
                    treat_single_year: Some(m > 0.0),
                })
                .collect(),
            pre_years: vec![2020],
            excluded_firms: Vec::new(),
        }
    }

    #[test]
    fn exact_model_produces_zero_residuals() {
        // Word is exactly 2*patent plus an industry effect, so the annual
        // cross-sections fit perfectly and every residual is zero.
        let mut rows = Vec::new();
        let mut patent = Vec::new();
        let mut word = Vec::new();
        let patents = [0.3, 1.1, 2.4, 0.9, 1.7, 3.2];
        for (f, &p) in patents.iter().enumerate() {
            let ind = if f < 3 { "I1" } else { "I2" };
            let effect = if f < 3 { 0.5 } else { -0.3 };
            for year in [2019, 2020] {
                rows.push((["A", "B", "C", "D", "E", "F"][f], year, ind));
                let pv = p + 0.1 * f64::from(year - 2019);
                patent.push(pv);
                word.push(2.0 * pv + effect);
            }
        }
        let rows: Vec<(&str, i32, &str)> = rows;
        let panel = panel_from(&rows, &[("AIPatent", patent), ("AIWord", word)]);
        let spec = DecouplingSpec {
            controls: Vec::new(),
            ..DecouplingSpec::new(vec![2019, 2020])
        };
        let resid = decoupling_residuals(&panel, &spec).unwrap();
        for r in resid.iter().flatten() {
            assert!(r.abs() < 1e-9, "residual {r}");
        }
    }

    #[test]
    fn planted_residuals_are_recovered_and_sum_to_zero_within_cells() {
        use crate::synth::{generate_panel, DgpConfig, Preset};
        let cfg = DgpConfig { n_firms: 2000, seed: 42, ..DgpConfig::preset(Preset::Persistence) };
        let (panel, truth) = generate_panel(&cfg).unwrap();
        let pre: Vec<i32> = (2015..=2020).collect();
        let spec = DecouplingSpec::new(pre.clone());
        let resid = decoupling_residuals(&panel, &spec).unwrap();

        let mut est = Vec::new();
        let mut planted = Vec::new();
        for i in 0..panel.n_rows() {
            if let Some(r) = resid[i] {
                est.push(r);
                planted.push(truth.planted_residuals[i]);
            }
        }
        assert_eq!(est.len(), 2000 * 6);
        let corr = stats::pearson(&est, &planted).unwrap();
        assert!(corr > 0.99, "recovery correlation {corr}");

        // Residuals sum to zero within every industry-year cell.
        let years = panel.years();
        let inds = panel.industry_codes();
        let mut sums = std::collections::HashMap::new();
        for i in 0..panel.n_rows() {
            if let Some(r) = resid[i] {
                *sums.entry((years[i], inds[i])).or_insert(0.0) += r;
            }
        }
        for ((y, ind), s) in sums {
            assert!(s.abs() < 1e-6, "cell ({y}, {ind}) residual sum {s}");
        }
    }

    #[test]
    fn stock_mode_accumulates_flows_within_firm() {
        let rows = vec![("A", 2018, "I1"), ("A", 2019, "I1"), ("A", 2020, "I1"),
                        ("B", 2018, "I1"), ("B", 2019, "I1"), ("B", 2020, "I1"),
                        ("C", 2018, "I1"), ("C", 2019, "I1"), ("C", 2020, "I1")];
        let patent = vec![1.0, 2.0, 3.0, 0.5, 0.5, 0.5, 2.0, 0.0, 1.0];
        // Word tracks the cumulative stock exactly, so stock-mode residuals
        // vanish while flow-mode residuals do not.
        let stock = [1.0, 3.0, 6.0, 0.5, 1.0, 1.5, 2.0, 2.0, 3.0];
        let word: Vec<f64> = stock.iter().map(|s| 1.5 * s).collect();
        let panel = panel_from(&rows, &[("AIPatent", patent), ("AIWord", word)]);
        let mut spec = DecouplingSpec {
            controls: Vec::new(),
            ..DecouplingSpec::new(vec![2019, 2020])
        };
        spec.patent_mode = PatentMode::Stock;
        let resid = decoupling_residuals(&panel, &spec).unwrap();
        for r in resid.iter().flatten() {
            assert!(r.abs() < 1e-9, "stock residual {r}");
        }
        spec.patent_mode = PatentMode::Flow;
        let resid = decoupling_residuals(&panel, &spec).unwrap();
        assert!(resid.iter().flatten().any(|r| r.abs() > 1e-3));
    }

    #[test]
    fn inflated_word_value_moves_its_residual_by_its_leverage_complement() {
        use nalgebra::DMatrix;
        let xs = [0.5, 1.5, 2.0, 3.0, 4.0, 5.5, 6.0, 8.0];
        let ys = [1.2, 2.9, 2.7, 4.4, 5.1, 6.9, 7.2, 9.5];
        let rows: Vec<(String, i32, &str)> =
            (0..8).map(|i| (format!("F{i}"), 2020, "I1")).collect();
        let rows_ref: Vec<(&str, i32, &str)> =
            rows.iter().map(|(f, y, i)| (f.as_str(), *y, *i)).collect();
        let spec = DecouplingSpec {
            controls: Vec::new(),
            ..DecouplingSpec::new(vec![2020])
        };
        let base = panel_from(&rows_ref, &[("AIPatent", xs.to_vec()), ("AIWord", ys.to_vec())]);
        let r0 = decoupling_residuals(&base, &spec).unwrap();

        let bumped = 2;
        let mut ys_b = ys;
        ys_b[bumped] += 2.0;
        let panel =
            panel_from(&rows_ref, &[("AIPatent", xs.to_vec()), ("AIWord", ys_b.to_vec())]);
        let r1 = decoupling_residuals(&panel, &spec).unwrap();

        // Leverage oracle on the explicit [1, x] design.
        let x = DMatrix::from_fn(8, 2, |i, j| if j == 0 { 1.0 } else { xs[i] });
        let hat = &x * (x.transpose() * &x).try_inverse().unwrap() * x.transpose();
        let delta = r1[bumped].unwrap() - r0[bumped].unwrap();
        assert_abs_diff_eq!(delta, 2.0 * (1.0 - hat[(bumped, bumped)]), epsilon = 1e-8);
    }

    #[test]
    fn assignment_rules_follow_their_sign_contracts() {
        // Firm A: uniformly positive; C: uniformly slightly negative;
        // D: no pre-period residuals at all.
        let pre: Vec<i32> = (2015..=2020).collect();
        let mut rows = Vec::new();
        for f in ["A", "C", "D"] {
            for y in 2015..=2021 {
                rows.push((f, y, "I1"));
            }
        }
        let panel = panel_from(&rows, &[]);
        let mut resid: Vec<Option<f64>> = vec![None; panel.n_rows()];
        let years = panel.years();
        let firms = panel.firm_codes();
        for i in 0..panel.n_rows() {
            if years[i] > 2020 {
                continue;
            }
            resid[i] = match panel.firm_label(firms[i]) {
                "A" => Some(1.0),
                "C" => Some(-0.1),
                _ => None,
            };
        }
        let table = assign_treatment(&panel, &resid, &pre).unwrap();
        assert_eq!(table.excluded_firms, vec!["D".to_string()]);
        let a = &table.firms[0];
        assert!(a.treat_mean && a.treat_strict == StrictStatus::Treated);
        assert_eq!(a.treat_single_year, Some(true));
        let c = &table.firms[1];
        assert!(!c.treat_mean && c.treat_strict == StrictStatus::Control);
        assert_eq!(c.treat_single_year, Some(false));

        let col = table.treatment_column(&panel, AssignmentMode::Mean).unwrap();
        for i in 0..panel.n_rows() {
            match panel.firm_label(firms[i]) {
                "A" => assert_eq!(col[i], Some(1.0)),
                "C" => assert_eq!(col[i], Some(0.0)),
                _ => assert_eq!(col[i], None),
            }
        }
    }

    #[test]
    fn mixed_signs_are_mean_treated_but_strict_excluded() {
        let rows = vec![("B", 2015, "I1"), ("B", 2016, "I1")];
        let panel = panel_from(&rows, &[]);
        let resid = vec![Some(3.0), Some(-1.0)];
        let table = assign_treatment(&panel, &resid, &[2015, 2016]).unwrap();
        let b = &table.firms[0];
        assert_abs_diff_eq!(b.mean_residual, 1.0);
        assert!(b.treat_mean);
        assert_eq!(b.treat_strict, StrictStatus::Excluded);
        assert_eq!(b.treat_single_year, Some(false));

        // Zero mean is control under the strict inequality.
        let resid = vec![Some(1.0), Some(-1.0)];
        let table = assign_treatment(&panel, &resid, &[2015, 2016]).unwrap();
        assert!(!table.firms[0].treat_mean);

        // A firm observed in only part of the window cannot be strict-labelled.
        let resid = vec![Some(2.0), None];
        let table = assign_treatment(&panel, &resid, &[2015, 2016]).unwrap();
        assert_eq!(table.firms[0].treat_strict, StrictStatus::Excluded);
        assert!(table.firms[0].treat_mean);
    }

    #[test]
    fn intensity_encodings_match_rank_arithmetic() {
        let table = table_from_means(&[-1.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let terciles = intensity_and_quantiles(&table, IntensityScheme::Terciles).unwrap();
        assert_eq!(terciles, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0]);
        let median = intensity_and_quantiles(&table, IntensityScheme::MedianSplit).unwrap();
        assert_eq!(median, vec![1.0, 1.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0]);

        let std = intensity_and_quantiles(&table, IntensityScheme::Standardized).unwrap();
        assert_abs_diff_eq!(stats::mean(&std).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(stats::sample_sd(&std).unwrap(), 1.0, epsilon = 1e-12);

        let raw = intensity_and_quantiles(&table, IntensityScheme::Raw).unwrap();
        let argmax = |v: &[f64]| {
            v.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0
        };
        assert_eq!(argmax(&raw), argmax(&std));

        let flat = table_from_means(&[0.7, 0.7, 0.7]);
        assert!(intensity_and_quantiles(&flat, IntensityScheme::Standardized).is_err());
        let sparse = table_from_means(&[-1.0, 0.5, 0.9]);
        assert!(intensity_and_quantiles(&sparse, IntensityScheme::Terciles).is_err());
    }

    #[test]
    fn z_difference_matches_hand_standardization_and_ignores_location() {
        let rows = vec![("A", 2020, "I1"), ("B", 2020, "I1"), ("C", 2020, "I1")];
        let word = vec![-1.0, 0.0, 1.0];
        let patent = vec![1.0, 0.0, -1.0];
        let panel = panel_from(&rows, &[("AIWord", word.clone()), ("AIPatent", patent.clone())]);
        let z = z_difference(&panel, "AIWord", "AIPatent", &[2020]).unwrap();
        assert_abs_diff_eq!(z.z_diff[0].unwrap(), -2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(z.z_diff[1].unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(z.z_diff[2].unwrap(), 2.0, epsilon = 1e-12);
        assert!(z.flagged_industries.is_empty());

        let shifted: Vec<f64> = word.iter().map(|w| w + 5.0).collect();
        let panel2 = panel_from(&rows, &[("AIWord", shifted), ("AIPatent", patent)]);
        let z2 = z_difference(&panel2, "AIWord", "AIPatent", &[2020]).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(z2.z_diff[i].unwrap(), z.z_diff[i].unwrap(), epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_variance_industry_is_flagged_with_missing_scores() {
        let rows = vec![
            ("A", 2020, "I1"), ("B", 2020, "I1"),
            ("C", 2020, "I2"), ("D", 2020, "I2"),
        ];
        // Industry I2 has constant patents: flagged, scores missing.
        let word = vec![0.0, 1.0, 0.0, 1.0];
        let patent = vec![0.0, 2.0, 3.0, 3.0];
        let panel = panel_from(&rows, &[("AIWord", word), ("AIPatent", patent)]);
        let z = z_difference(&panel, "AIWord", "AIPatent", &[2020]).unwrap();
        assert_eq!(z.flagged_industries, vec!["I2".to_string()]);
        assert!(z.z_diff[0].is_some() && z.z_diff[1].is_some());
        assert!(z.z_diff[2].is_none() && z.z_diff[3].is_none());
    }

    #[test]
    fn constant_residuals_give_identity_transitions_and_unit_correlation() {
        let mut rows = Vec::new();
        let mut resid = Vec::new();
        for f in 0..9 {
            for y in 2017..=2020 {
                rows.push((format!("F{f}"), y, "I1"));
                resid.push(Some(f as f64 + 1.0));
            }
        }
        let rows_ref: Vec<(&str, i32, &str)> =
            rows.iter().map(|(f, y, i)| (f.as_str(), *y, *i)).collect();
        let panel = panel_from(&rows_ref, &[]);
        let stats = persistence_stats(&panel, &resid).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert_abs_diff_eq!(stats.transition[r][c], f64::from(u8::from(r == c)), epsilon = 1e-12);
            }
        }
        assert_abs_diff_eq!(stats.spearman, 1.0, epsilon = 1e-12);
        assert_eq!(stats.n_pairs, 27);
    }

    #[test]
    fn independent_reshuffling_leaves_two_thirds_off_diagonal() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut rows = Vec::new();
        let mut resid = Vec::new();
        for f in 0..300 {
            for y in 2015..=2024 {
                rows.push((format!("F{f:03}"), y, "I1"));
                resid.push(Some(rng.sample::<f64, _>(StandardNormal)));
            }
        }
        let rows_ref: Vec<(&str, i32, &str)> =
            rows.iter().map(|(f, y, i)| (f.as_str(), *y, *i)).collect();
        let panel = panel_from(&rows_ref, &[]);
        let stats = persistence_stats(&panel, &resid).unwrap();
        for r in 0..3 {
            let row_sum: f64 = stats.transition[r].iter().sum();
            assert_abs_diff_eq!(row_sum, 1.0, epsilon = 1e-12);
            let off = 1.0 - stats.transition[r][r];
            assert!((off - 2.0 / 3.0).abs() < 0.05, "row {r} off-diagonal {off}");
        }
        assert!(stats.spearman.abs() < 0.05, "spearman {}", stats.spearman);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn quantile_encodings_ignore_monotone_sign_preserving_maps(
            means in proptest::collection::vec(-5.0f64..5.0, 8..40),
            scale in 0.1f64..10.0,
            cubic in 0.0f64..5.0,
        ) {
            prop_assume!(means.iter().filter(|&&m| m > 0.0).count() >= 3);
            // Distinct values keep the rank split unambiguous under fp math.
            let mut sorted = means.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            prop_assume!(sorted.windows(2).all(|w| w[1] - w[0] > 1e-9));

            let mapped: Vec<f64> =
                means.iter().map(|&m| scale * m + cubic * m.powi(3)).collect();
            let t1 = table_from_means(&means);
            let t2 = table_from_means(&mapped);
            for scheme in [IntensityScheme::MedianSplit, IntensityScheme::Terciles] {
                let a = intensity_and_quantiles(&t1, scheme).unwrap();
                let b = intensity_and_quantiles(&t2, scheme).unwrap();
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn strict_rule_partitions_every_firm(
            values in proptest::collection::vec(
                proptest::option::weighted(0.8, -1.0f64..1.0), 30),
        ) {
            let mut rows = Vec::new();
            for f in 0..10 {
                for y in [2018, 2019, 2020] {
                    rows.push((format!("F{f}"), y, "I1"));
                }
            }
            let rows_ref: Vec<(&str, i32, &str)> =
                rows.iter().map(|(f, y, i)| (f.as_str(), *y, *i)).collect();
            let panel = panel_from(&rows_ref, &[]);
            let table = assign_treatment(&panel, &values, &[2018, 2019, 2020]).unwrap();
            prop_assert_eq!(table.firms.len() + table.excluded_firms.len(), 10);
            for fa in &table.firms {
                prop_assert_eq!(fa.treat_mean, fa.mean_residual > 0.0);
                match fa.treat_strict {
                    StrictStatus::Treated => {
                        prop_assert_eq!(fa.residuals.len(), 3);
                        prop_assert!(fa.residuals.iter().all(|&(_, r)| r > 0.0));
                    }
                    StrictStatus::Control => {
                        prop_assert_eq!(fa.residuals.len(), 3);
                        prop_assert!(fa.residuals.iter().all(|&(_, r)| r <= 0.0));
                    }
                    StrictStatus::Excluded => {
                        let full = fa.residuals.len() == 3;
                        let pos = fa.residuals.iter().all(|&(_, r)| r > 0.0);
                        let neg = fa.residuals.iter().all(|&(_, r)| r <= 0.0);
                        prop_assert!(!full || (!pos && !neg));
                    }
                }
            }
        }
    }
}
