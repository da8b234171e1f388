//! Synthetic firm-year panel generator with fully known ground truth.
//!
//! Every estimator in this crate is verified against panels produced here:
//! the data-generating process plants a treatment effect, an event-time
//! path, a selection mechanism, a cross-equation error covariance, and an
//! autocorrelated disclosure residual, and [`GroundTruth`] records each
//! planted quantity so tests can compare estimates against the truth.
//!
//! Generation is a pure function of [`DgpConfig`]: identical configs yield
//! bit-identical panels regardless of thread count. Monte-Carlo replication
//! batches vary only [`DgpConfig::replication`], which selects an
//! independent counter-mode RNG stream for the same seed.
//!
//! Noise is Gaussian throughout so that oracle expectations have closed
//! forms.
//!
//! # References
//!
//! - Cameron, A. C. & Trivedi, P. K. (2005). *Microeconometrics: Methods
//!   and Applications*. Cambridge University Press. (Selection DGPs.)
//! - Heckman, J. (1979). Sample selection bias as a specification error.
//!   *Econometrica*, 47(1), 153-161.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::panel::{PanelBuilder, PanelDataset};

/// Named scenario that selects which planted mechanisms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Parallel pre-trends; a pure step effect of `beta_treat` at the policy year.
    DidParallel,
    /// Treated firms drift away from controls linearly in event time.
    DidViolatedPretrend,
    /// Outcome observed only for endogenously selected rows (correlated errors).
    Selection,
    /// Four standardized outcomes with cross-equation error correlation.
    SurSystem,
    /// Disclosure residuals follow a within-firm AR(1) process.
    Persistence,
}

impl Preset {
    /// Stable lowercase name used in sidecar files and CLI arguments.
    pub fn name(self) -> &'static str {
        match self {
            Preset::DidParallel => "did_parallel",
            Preset::DidViolatedPretrend => "did_violated_pretrend",
            Preset::Selection => "selection",
            Preset::SurSystem => "sur_system",
            Preset::Persistence => "persistence",
        }
    }

    /// Parse a preset from its stable name.
    pub fn parse(name: &str) -> Result<Preset> {
        match name {
            "did_parallel" => Ok(Preset::DidParallel),
            "did_violated_pretrend" => Ok(Preset::DidViolatedPretrend),
            "selection" => Ok(Preset::Selection),
            "sur_system" => Ok(Preset::SurSystem),
            "persistence" => Ok(Preset::Persistence),
            other => Err(Error::config(format!(
                "unknown preset `{other}`; expected one of did_parallel, \
                 did_violated_pretrend, selection, sur_system, persistence"
            ))),
        }
    }
}

/// Standard deviations of the additive fixed-effect components.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FeScales {
    /// Firm-level intercept scale.
    pub firm: f64,
    /// Calendar-year shock scale.
    pub year: f64,
    /// Industry-by-year shock scale.
    pub industry_year: f64,
    /// Province-by-year shock scale.
    pub province_year: f64,
}

impl Default for FeScales {
    fn default() -> Self {
        FeScales { firm: 0.5, year: 0.2, industry_year: 0.1, province_year: 0.1 }
    }
}

/// Parameters of the synthetic data-generating process.
#[derive(Debug, Clone, Serialize)]
pub struct DgpConfig {
    /// Which planted mechanisms are active.
    pub preset: Preset,
    /// Number of firms in the balanced panel.
    pub n_firms: usize,
    /// First calendar year (inclusive).
    pub start_year: i32,
    /// Last calendar year (inclusive).
    pub end_year: i32,
    /// First year of the post period (`Post = 1` iff `year >= policy_year`).
    pub policy_year: i32,
    /// Planted coefficient on `Treat x Post` in the primary outcome.
    pub beta_treat: f64,
    /// Share of firms assigned to the treated group.
    pub treated_share: f64,
    /// Correlation between the selection error and the outcome error.
    pub selection_rho: f64,
    /// Cross-equation error correlation matrix for the four-outcome system.
    pub sur_error_corr: Vec<Vec<f64>>,
    /// Planted `Treat x Post` coefficients for the four-outcome system,
    /// ordered (cost, flow, word, patent).
    pub sur_coefs: [f64; 4],
    /// AR(1) coefficient of the planted disclosure residual, in `[0, 1)`.
    pub residual_ar: f64,
    /// Scales of the additive fixed-effect components.
    pub fe_scales: FeScales,
    /// Coefficients on the seven generated firm controls, in the order
    /// (Size, Lev, ROA, Liquid, Top5, TobinQ, ListAge).
    pub control_coefs: [f64; 7],
    /// Idiosyncratic outcome noise scale.
    pub noise_sd: f64,
    /// Scale of the firm-level random post-period slope. A nonzero value
    /// induces within-firm error correlation that survives firm fixed
    /// effects, so cluster-robust standard errors are required for correct
    /// coverage.
    pub post_shock_sd: f64,
    /// Per-year drift of the treated group in event time (pre-trend violation).
    pub pretrend_slope: f64,
    /// Planted coefficient on `Treat x Post x Mshare` (moderation).
    pub beta_interaction: f64,
    /// Separation between treated and control firms' mean disclosure
    /// residuals (treated shifted up by half, controls down by half), so
    /// residual-based treatment construction can recover the planted labels.
    pub washing_shift: f64,
    /// Selection-equation coefficients: intercept, instrument (`IT_ratio`),
    /// entry-barrier control (`no_entry`), and `Treat x Post`.
    pub selection_gamma: [f64; 4],
    /// Number of industry levels.
    pub n_industries: usize,
    /// Number of province levels.
    pub n_provinces: usize,
    /// Master RNG seed.
    pub seed: u64,
    /// Replication index; selects an independent RNG stream for the same seed.
    pub replication: u64,
}

impl DgpConfig {
    /// Baseline configuration for the given preset.
    pub fn preset(preset: Preset) -> DgpConfig {
        let mut cfg = DgpConfig {
            preset,
            n_firms: 500,
            start_year: 2015,
            end_year: 2024,
            policy_year: 2021,
            beta_treat: 0.125,
            treated_share: 0.169,
            selection_rho: 0.0,
            sur_error_corr: equicorrelation(4, 0.4),
            sur_coefs: [0.018, -0.049, -0.044, 0.051],
            residual_ar: 0.0,
            fe_scales: FeScales::default(),
            control_coefs: [-0.02, 0.5, -0.8, -0.01, -0.1, 0.01, 0.02],
            noise_sd: 0.3,
            post_shock_sd: 0.1,
            pretrend_slope: 0.0,
            beta_interaction: 0.0,
            washing_shift: 2.0,
            selection_gamma: [0.8, 1.5, -0.5, -1.5],
            n_industries: 12,
            n_provinces: 8,
            seed: 0,
            replication: 0,
        };
        match preset {
            Preset::DidParallel => {}
            Preset::DidViolatedPretrend => cfg.pretrend_slope = 0.03,
            Preset::Selection => cfg.selection_rho = 0.8,
            Preset::SurSystem => {}
            Preset::Persistence => {
                cfg.residual_ar = 0.7;
                // The AR(1) residual is the planted object here; a group
                // shift would contaminate its year-over-year rank
                // correlation, so labels are not encoded in the residuals.
                cfg.washing_shift = 0.0;
            }
        }
        cfg
    }

    fn validate(&self) -> Result<()> {
        if self.n_firms < 2 {
            return Err(Error::config("n_firms must be at least 2".to_string()));
        }
        if self.start_year > self.end_year {
            return Err(Error::config(format!(
                "year range is empty: start {} > end {}",
                self.start_year, self.end_year
            )));
        }
        if self.policy_year <= self.start_year || self.policy_year > self.end_year {
            return Err(Error::config(format!(
                "policy_year {} must lie inside ({}, {}] so both periods are observed",
                self.policy_year, self.start_year, self.end_year
            )));
        }
        if !(0.0..=1.0).contains(&self.treated_share) {
            return Err(Error::config(format!(
                "treated_share {} outside [0, 1]",
                self.treated_share
            )));
        }
        if !(-1.0..=1.0).contains(&self.selection_rho) {
            return Err(Error::config(format!(
                "selection_rho {} outside [-1, 1]",
                self.selection_rho
            )));
        }
        if !(0.0..1.0).contains(&self.residual_ar) {
            return Err(Error::config(format!(
                "residual_ar {} outside [0, 1)",
                self.residual_ar
            )));
        }
        if self.n_industries == 0 || self.n_provinces == 0 {
            return Err(Error::config(
                "n_industries and n_provinces must be positive".to_string(),
            ));
        }
        let m = self.sur_error_corr.len();
        if m != 4 || self.sur_error_corr.iter().any(|row| row.len() != m) {
            return Err(Error::config(
                "sur_error_corr must be a 4x4 matrix".to_string(),
            ));
        }
        for i in 0..m {
            if (self.sur_error_corr[i][i] - 1.0).abs() > 1e-12 {
                return Err(Error::config(
                    "sur_error_corr must have a unit diagonal".to_string(),
                ));
            }
            for j in 0..i {
                if (self.sur_error_corr[i][j] - self.sur_error_corr[j][i]).abs() > 1e-12 {
                    return Err(Error::config("sur_error_corr must be symmetric".to_string()));
                }
            }
        }
        Ok(())
    }
}

/// Equicorrelation matrix: unit diagonal, constant `rho` off the diagonal.
pub fn equicorrelation(m: usize, rho: f64) -> Vec<Vec<f64>> {
    (0..m)
        .map(|i| (0..m).map(|j| if i == j { 1.0 } else { rho }).collect())
        .collect()
}

/// Planted per-event-time effect on the primary outcome.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EventTimeEffect {
    /// Years since the policy year.
    pub tau: i32,
    /// Planted treated-minus-control effect at this event time.
    pub effect: f64,
}

/// Planted selection-equation parameters.
#[derive(Debug, Clone, Serialize)]
pub struct SelectionTruth {
    /// Intercept.
    pub gamma_const: f64,
    /// Coefficient on the instrument `IT_ratio`.
    pub gamma_instrument: f64,
    /// Coefficient on the entry-barrier control `no_entry`.
    pub gamma_no_entry: f64,
    /// Coefficient on `Treat x Post`.
    pub gamma_treat_post: f64,
    /// Correlation between selection and outcome errors.
    pub rho: f64,
    /// Realized share of selected rows.
    pub selected_share: f64,
}

/// Every quantity the generator planted, for comparison against estimates.
#[derive(Debug, Clone, Serialize)]
pub struct GroundTruth {
    /// Name of the active preset.
    pub preset: String,
    /// Firm labels in panel order of the firm coding.
    pub firm_labels: Vec<String>,
    /// Treatment label per firm, aligned with `firm_labels`.
    pub treated_firms: Vec<bool>,
    /// Planted coefficient on `Treat x Post` in the primary outcome.
    pub beta_treat: f64,
    /// Planted effect at each event time in the observed window.
    pub event_path: Vec<EventTimeEffect>,
    /// Planted moderation coefficient on `Treat x Post x Mshare`.
    pub beta_interaction: f64,
    /// Selection mechanism, when the selection preset is active.
    pub selection: Option<SelectionTruth>,
    /// Error covariance of the four-outcome system (unit variances, so this
    /// equals the correlation matrix), when the system preset is active.
    pub sur_sigma: Option<Vec<Vec<f64>>>,
    /// Planted `Treat x Post` coefficients of the four-outcome system.
    pub sur_coefs: Option<Vec<f64>>,
    /// AR(1) coefficient of the planted disclosure residual.
    pub residual_ar: f64,
    /// Planted disclosure residual per panel row (systematic disclosure
    /// drivers removed), aligned with the emitted panel rows.
    pub planted_residuals: Vec<f64>,
}

impl GroundTruth {
    /// Serialize to pretty JSON for the sidecar file.
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::data(format!("ground truth serialization failed: {e}")))
    }
}

/// Deterministic RNG for one (seed, stream) pair. Streams are independent
/// counter-mode partitions, so replication batches can run in parallel and
/// still reproduce bit-identically in any order.
fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn draw_normal(rng: &mut ChaCha12Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

/// Generate a balanced firm-year panel plus the ground truth that produced it.
///
/// The primary outcome is
/// `DebtFC = firm FE + year FE + industry-year + province-year
///  + controls * control_coefs + beta_treat * Treat * Post + noise`,
/// with preset-specific additions (pre-trend drift, selection, moderation).
/// Rows are emitted for every firm-year combination; under the selection
/// preset the primary outcome is missing for unselected rows.
pub fn generate_panel(cfg: &DgpConfig) -> Result<(PanelDataset, GroundTruth)> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, cfg.replication);

    let n_firms = cfg.n_firms;
    let years: Vec<i32> = (cfg.start_year..=cfg.end_year).collect();
    let n_years = years.len();
    let n_rows = n_firms * n_years;
    let label_width = n_firms.to_string().len().max(4);

    // --- Firm-level structure -------------------------------------------
    let firm_labels: Vec<String> = (0..n_firms)
        .map(|i| format!("F{:0width$}", i + 1, width = label_width))
        .collect();
    let n_treated = (n_firms as f64 * cfg.treated_share).round() as usize;
    let mut order: Vec<usize> = (0..n_firms).collect();
    order.shuffle(&mut rng);
    let mut treated = vec![false; n_firms];
    for &i in order.iter().take(n_treated) {
        treated[i] = true;
    }

    let industry: Vec<usize> = (0..n_firms).map(|_| rng.random_range(0..cfg.n_industries)).collect();
    let province: Vec<usize> = (0..n_firms).map(|_| rng.random_range(0..cfg.n_provinces)).collect();

    let firm_fe: Vec<f64> = (0..n_firms).map(|_| cfg.fe_scales.firm * draw_normal(&mut rng)).collect();
    let post_slope: Vec<f64> = (0..n_firms).map(|_| cfg.post_shock_sd * draw_normal(&mut rng)).collect();
    let year_fe: Vec<f64> = (0..n_years).map(|_| cfg.fe_scales.year * draw_normal(&mut rng)).collect();
    let ind_year: Vec<f64> = (0..cfg.n_industries * n_years)
        .map(|_| cfg.fe_scales.industry_year * draw_normal(&mut rng))
        .collect();
    let prov_year: Vec<f64> = (0..cfg.n_provinces * n_years)
        .map(|_| cfg.fe_scales.province_year * draw_normal(&mut rng))
        .collect();

    // Firm-level bases give controls within-firm persistence.
    let control_means = [22.0, 0.42, 0.04, 2.0, 0.52, 0.14, 2.2];
    let control_sds = [1.3, 0.18, 0.06, 1.2, 0.14, 1.0, 0.6];
    let control_names = ["Size", "Lev", "ROA", "Liquid", "Top5", "TobinQ", "ListAge"];
    let control_base: Vec<[f64; 7]> = (0..n_firms)
        .map(|_| std::array::from_fn(|_| draw_normal(&mut rng)))
        .collect();

    let mshare_firm: Vec<f64> = (0..n_firms).map(|_| 0.3 + 0.15 * draw_normal(&mut rng)).collect();
    let no_entry_firm: Vec<f64> = (0..n_firms).map(|_| ind(rng.random_bool(0.3))).collect();

    // Secondary outcome structure (used directly outside the system preset).
    let flow_firm_fe: Vec<f64> = (0..n_firms).map(|_| cfg.fe_scales.firm * draw_normal(&mut rng)).collect();
    let flow_year_fe: Vec<f64> = (0..n_years).map(|_| cfg.fe_scales.year * draw_normal(&mut rng)).collect();

    // Disclosure-measure structure: word counts load on patents plus an
    // industry effect plus the planted residual.
    let disc_ind_fe: Vec<f64> = (0..cfg.n_industries).map(|_| 0.5 * draw_normal(&mut rng)).collect();

    // Four-outcome system structure.
    let sur_active = cfg.preset == Preset::SurSystem;
    let sur_chol = if sur_active {
        let m = 4;
        let corr = DMatrix::from_fn(m, m, |i, j| cfg.sur_error_corr[i][j]);
        let chol = corr
            .cholesky()
            .ok_or_else(|| Error::config("sur_error_corr is not positive definite".to_string()))?;
        Some(chol.l())
    } else {
        None
    };
    let sur_firm_fe: Vec<[f64; 4]> = (0..n_firms)
        .map(|_| std::array::from_fn(|_| cfg.fe_scales.firm * draw_normal(&mut rng)))
        .collect();
    let sur_year_fe: Vec<[f64; 4]> = (0..n_years)
        .map(|_| std::array::from_fn(|_| cfg.fe_scales.year * draw_normal(&mut rng)))
        .collect();

    let selection_active = cfg.preset == Preset::Selection;

    // --- Row-level draws (firm-major, year-ascending = panel order) ------
    let mut col_treat = Vec::with_capacity(n_rows);
    let mut col_debt_fc: Vec<Option<f64>> = Vec::with_capacity(n_rows);
    let mut col_debt_flow = Vec::with_capacity(n_rows);
    let mut col_word = Vec::with_capacity(n_rows);
    let mut col_patent = Vec::with_capacity(n_rows);
    let mut col_patent_app = Vec::with_capacity(n_rows);
    let mut col_controls: Vec<Vec<f64>> = vec![Vec::with_capacity(n_rows); 7];
    let mut col_it_ratio = Vec::with_capacity(n_rows);
    let mut col_no_entry = Vec::with_capacity(n_rows);
    let mut col_mshare = Vec::with_capacity(n_rows);
    let mut col_selected = Vec::with_capacity(n_rows);
    let mut planted_residuals = Vec::with_capacity(n_rows);

    let mut firms_col = Vec::with_capacity(n_rows);
    let mut years_col = Vec::with_capacity(n_rows);
    let mut industries_col = Vec::with_capacity(n_rows);
    let mut provinces_col = Vec::with_capacity(n_rows);

    let mut n_selected = 0usize;

    for f in 0..n_firms {
        let treat = ind(treated[f]);
        let mut disc_resid = 0.0; // AR(1) state, stationary start below
        for (t, &year) in years.iter().enumerate() {
            firms_col.push(firm_labels[f].clone());
            years_col.push(year);
            industries_col.push(format!("IND{:02}", industry[f] + 1));
            provinces_col.push(format!("P{:02}", province[f] + 1));

            let post = ind(year >= cfg.policy_year);
            let tau = year - cfg.policy_year;

            // Controls: persistent firm base plus year-level innovation.
            let mut control_term = 0.0;
            let mut row_controls = [0.0; 7];
            for k in 0..7 {
                let z = (control_base[f][k] + draw_normal(&mut rng)) / std::f64::consts::SQRT_2;
                let value = control_means[k] + control_sds[k] * z;
                row_controls[k] = value;
                control_term += cfg.control_coefs[k] * value;
                col_controls[k].push(value);
            }

            let it_ratio = draw_normal(&mut rng);
            col_it_ratio.push(it_ratio);
            col_no_entry.push(no_entry_firm[f]);
            col_mshare.push(mshare_firm[f]);
            col_treat.push(treat);

            // Disclosure measures with a planted residual. The residual is
            // the full non-systematic part: AR(1) noise plus the group shift
            // that encodes the planted labels.
            if t == 0 {
                disc_resid = draw_normal(&mut rng);
            } else {
                let innov = (1.0 - cfg.residual_ar * cfg.residual_ar).sqrt();
                disc_resid = cfg.residual_ar * disc_resid + innov * draw_normal(&mut rng);
            }
            let shift = cfg.washing_shift * (treat - 0.5);
            let residual = disc_resid + shift;
            planted_residuals.push(residual);
            let patent = draw_normal(&mut rng);
            let patent_app = patent + 0.3 * draw_normal(&mut rng);
            col_patent.push(patent);
            col_patent_app.push(patent_app);

            // Outcome errors. Under selection the outcome error shares a
            // component with the selection error; elsewhere it is pure noise.
            let (eps, selected) = if selection_active {
                let u = draw_normal(&mut rng);
                let e = draw_normal(&mut rng);
                let g = &cfg.selection_gamma;
                let index = g[0] + g[1] * it_ratio + g[2] * no_entry_firm[f] + g[3] * treat * post;
                let selected = index + u > 0.0;
                let rho = cfg.selection_rho;
                let eps = cfg.noise_sd * (rho * u + (1.0 - rho * rho).sqrt() * e);
                (eps, selected)
            } else {
                (cfg.noise_sd * draw_normal(&mut rng), true)
            };
            n_selected += usize::from(selected);
            col_selected.push(ind(selected));

            let systematic = firm_fe[f]
                + year_fe[t]
                + ind_year[industry[f] * n_years + t]
                + prov_year[province[f] * n_years + t]
                + control_term;
            let effect = cfg.beta_treat * treat * post
                + cfg.pretrend_slope * treat * f64::from(tau)
                + cfg.beta_interaction * treat * post * (mshare_firm[f] - 0.3)
                + post_slope[f] * post;
            let debt_fc = systematic + effect + eps;
            col_debt_fc.push(selected.then_some(debt_fc));

            // System draws share one correlated error vector per row.
            if let Some(l) = &sur_chol {
                let z = DMatrix::from_fn(4, 1, |_, _| draw_normal(&mut rng));
                let e = l * z;
                let mut y = [0.0; 4];
                for m in 0..4 {
                    y[m] = sur_firm_fe[f][m]
                        + sur_year_fe[t][m]
                        + cfg.sur_coefs[m] * treat * post
                        + e[(m, 0)];
                }
                // System outcomes replace the structural measures so that
                // joint-estimation checks see the planted covariance.
                col_debt_flow.push(y[1]);
                col_word.push(y[2]);
                *col_patent.last_mut().unwrap() = y[3];
                *col_patent_app.last_mut().unwrap() = y[3] + 0.3 * draw_normal(&mut rng);
                *col_debt_fc.last_mut().unwrap() = Some(y[0]);
            } else {
                let flow = flow_firm_fe[f] + flow_year_fe[t] + 0.3 * draw_normal(&mut rng);
                col_debt_flow.push(flow);
                let word = 0.5 * patent + disc_ind_fe[industry[f]] + residual;
                col_word.push(word);
            }
        }
    }

    // --- Assemble ---------------------------------------------------------
    let mut builder = PanelBuilder {
        firms: firms_col,
        years: years_col,
        industries: industries_col,
        provinces: provinces_col,
        columns: Vec::new(),
    };
    builder.columns.push(("Treat".to_string(), dense(col_treat)));
    builder.columns.push(("DebtFC".to_string(), col_debt_fc));
    builder.columns.push(("DebtFlow".to_string(), dense(col_debt_flow)));
    builder.columns.push(("AIWord".to_string(), dense(col_word)));
    builder.columns.push(("AIPatent".to_string(), dense(col_patent)));
    builder.columns.push(("AIPatentApp".to_string(), dense(col_patent_app)));
    for (k, name) in control_names.iter().enumerate() {
        builder.columns.push((name.to_string(), dense(std::mem::take(&mut col_controls[k]))));
    }
    builder.columns.push(("IT_ratio".to_string(), dense(col_it_ratio)));
    builder.columns.push(("no_entry".to_string(), dense(col_no_entry)));
    builder.columns.push(("Mshare".to_string(), dense(col_mshare)));
    builder.columns.push(("selected".to_string(), dense(col_selected)));
    let panel = builder.build()?;

    let event_path: Vec<EventTimeEffect> = years
        .iter()
        .map(|&year| {
            let tau = year - cfg.policy_year;
            let step = if tau >= 0 { cfg.beta_treat } else { 0.0 };
            EventTimeEffect { tau, effect: step + cfg.pretrend_slope * f64::from(tau) }
        })
        .collect();

    let truth = GroundTruth {
        preset: cfg.preset.name().to_string(),
        firm_labels,
        treated_firms: treated,
        beta_treat: cfg.beta_treat,
        event_path,
        beta_interaction: cfg.beta_interaction,
        selection: selection_active.then(|| SelectionTruth {
            gamma_const: cfg.selection_gamma[0],
            gamma_instrument: cfg.selection_gamma[1],
            gamma_no_entry: cfg.selection_gamma[2],
            gamma_treat_post: cfg.selection_gamma[3],
            rho: cfg.selection_rho,
            selected_share: n_selected as f64 / n_rows as f64,
        }),
        sur_sigma: sur_active.then(|| cfg.sur_error_corr.clone()),
        sur_coefs: sur_active.then(|| cfg.sur_coefs.to_vec()),
        residual_ar: cfg.residual_ar,
        planted_residuals,
    };
    Ok((panel, truth))
}

/// 1.0/0.0 indicator.
fn ind(b: bool) -> f64 {
    if b { 1.0 } else { 0.0 }
}

fn dense(values: Vec<f64>) -> Vec<Option<f64>> {
    values.into_iter().map(Some).collect()
}
