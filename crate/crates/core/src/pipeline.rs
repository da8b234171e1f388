//! End-to-end study pipeline: configuration, staged execution, and report
//! emission.
//!
//! A [`PipelineConfig`] (one TOML file) fixes the whole study: the input
//! panel (a CSV or a synthetic scenario), the cleaning rules, the residual
//! construction and treatment assignment, the baseline design, and which
//! robustness stages run. [`run_pipeline`] executes the stages in order —
//! load, screen, wash, assign, estimate, robustness, joint system, report —
//! and any failure aborts with the stage's name tagged onto the error.
//!
//! Determinism contract: the pair (config, seed) fixes every emitted byte.
//! Randomized stages derive one RNG substream per draw, reductions are
//! order-fixed, and reports serialize canonically, so the thread count
//! never changes results. `PANELCAUSAL_THREADS` overrides the configured
//! worker count without affecting output bytes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::causal::{
    balance_diagnostics, did_estimate, entropy_balance_yearly, event_study, firm_weights_to_rows,
    heckman_two_stage, moderated_did, placebo_permutation, pre_period_means, psm_match,
    subsample_compare, DidSpec, EventStudyResult, EventWindow, HeckmanResult, PlaceboResult,
    SelectionSpec, SplitComparison, WeightMethod, WeightVector, INTERACTION,
};
use crate::error::{Error, Result};
use crate::panel::{
    load_panel, screen, KeyVar, PanelDataset, PanelSchema, ScreeningConfig, ScreeningReport,
};
use crate::regress::{ols_cluster, Coefficient, FixedEffectSpec, MleResult, RegressionResult};
use crate::report::{
    correlation_table, descriptive_table, starred, to_canonical_json, CorrelationTable,
    DescriptiveRow, Table,
};
use crate::stats;
use crate::sur::{
    breusch_pagan_independence, individual_zero_wald, joint_zero_wald, signed_equality_wald,
    sur_fit, IndependenceTest, SurEquation, SurFit, SurSystem, VcovMode, WaldTest,
};
use crate::synth::{generate_panel, DgpConfig, Preset};
use crate::washing::{
    assign_treatment, decoupling_residuals, intensity_and_quantiles, persistence_stats,
    z_difference, AssignmentMode, AssignmentTable, DecouplingSpec, IntensityScheme, PatentMode,
    PersistenceStats, StrictStatus,
};

/// Full study configuration, read from one TOML file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Input source (exactly one of CSV or synthetic).
    pub input: InputSection,
    /// Cleaning rules.
    #[serde(default)]
    pub screening: ScreeningSection,
    /// Residual construction and treatment assignment.
    #[serde(default)]
    pub washing: WashingSection,
    /// Baseline design.
    #[serde(default)]
    pub did: DidSection,
    /// Robustness toggles.
    #[serde(default)]
    pub robustness: RobustnessSection,
    /// Joint multi-outcome system.
    #[serde(default)]
    pub sur: SurSection,
    /// Moderation designs.
    #[serde(default)]
    pub moderation: ModerationSection,
    /// Subsample split comparisons.
    #[serde(default)]
    pub heterogeneity: HeterogeneitySection,
    /// Report contents.
    #[serde(default)]
    pub report: ReportSection,
    /// Master seed for every randomized stage.
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Worker threads; 0 uses the library default. Scheduling only — results
    /// are identical for any value.
    #[serde(default)]
    pub threads: usize,
    /// Output directory for emitted reports.
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_seed() -> u64 {
    42
}

fn default_output() -> PathBuf {
    PathBuf::from("report")
}

/// Input source: a panel CSV or a synthetic scenario.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSection {
    /// Panel CSV path.
    pub csv: Option<PathBuf>,
    /// Header of the firm column (CSV input).
    pub firm_column: Option<String>,
    /// Header of the year column (CSV input).
    pub year_column: Option<String>,
    /// Header of the industry column (CSV input).
    pub industry_column: Option<String>,
    /// Header of the province column (CSV input).
    pub province_column: Option<String>,
    /// Synthetic scenario name.
    pub synthetic: Option<String>,
    /// Synthetic: number of firms.
    pub n_firms: Option<usize>,
    /// Synthetic: first year.
    pub start_year: Option<i32>,
    /// Synthetic: last year.
    pub end_year: Option<i32>,
    /// Synthetic: planted treatment effect.
    pub beta_treat: Option<f64>,
    /// Synthetic: share of treated firms.
    pub treated_share: Option<f64>,
    /// Synthetic: idiosyncratic noise scale.
    pub noise_sd: Option<f64>,
    /// Synthetic: planted moderation coefficient.
    pub beta_interaction: Option<f64>,
}

/// Cleaning rules (mirrors [`ScreeningConfig`]).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScreeningSection {
    /// Industry-code prefixes to exclude.
    #[serde(default)]
    pub exclude_industries: Vec<String>,
    /// Status-flag column; rows with a nonzero flag are dropped.
    #[serde(default)]
    pub status_flag: Option<String>,
    /// Rows missing any of these columns are dropped.
    #[serde(default)]
    pub require_nonmissing: Vec<String>,
    /// Columns imputed with industry-year means.
    #[serde(default)]
    pub impute_group_mean: Vec<String>,
    /// Columns winsorized after imputation.
    #[serde(default)]
    pub winsorize: Vec<String>,
    /// Winsorization tail probabilities; default (0.01, 0.99).
    #[serde(default)]
    pub winsorize_limits: Option<(f64, f64)>,
}

impl ScreeningSection {
    /// The screening rules in the form the cleaning stage consumes.
    pub fn to_config(&self) -> ScreeningConfig {
        ScreeningConfig {
            exclude_industries: self.exclude_industries.clone(),
            status_flag: self.status_flag.clone(),
            require_nonmissing: self.require_nonmissing.clone(),
            impute_group_mean: self.impute_group_mean.clone(),
            winsorize: self.winsorize.clone(),
            winsorize_limits: self.winsorize_limits.unwrap_or((0.01, 0.99)),
        }
    }
}

/// Residual construction and treatment assignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WashingSection {
    /// Pre-policy window years; empty derives the three years before the
    /// policy year.
    #[serde(default)]
    pub pre_years: Vec<i32>,
    /// Disclosure word-measure column.
    #[serde(default = "default_word")]
    pub word: String,
    /// Patent measure variant: `flow`, `stock`, or `application`.
    #[serde(default = "default_patent_mode")]
    pub patent_mode: String,
    /// Controls of the annual cross-sections; empty uses the standard set.
    #[serde(default)]
    pub controls: Vec<String>,
    /// Assignment rule: `mean`, `strict`, or `single_year`.
    #[serde(default = "default_treatment")]
    pub treatment: String,
}

fn default_word() -> String {
    "AIWord".to_string()
}

fn default_patent_mode() -> String {
    "flow".to_string()
}

fn default_treatment() -> String {
    "mean".to_string()
}

impl Default for WashingSection {
    fn default() -> Self {
        WashingSection {
            pre_years: Vec::new(),
            word: default_word(),
            patent_mode: default_patent_mode(),
            controls: Vec::new(),
            treatment: default_treatment(),
        }
    }
}

/// Baseline design.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DidSection {
    /// Outcome column.
    #[serde(default = "default_outcome")]
    pub outcome: String,
    /// First post-period year.
    #[serde(default = "default_policy_year")]
    pub policy_year: i32,
    /// Control columns.
    #[serde(default = "standard_controls")]
    pub controls: Vec<String>,
    /// Absorbed effects: `firm_year` or `four_way`.
    #[serde(default = "default_fe")]
    pub fixed_effects: String,
    /// Cluster key: `firm`, `year`, `industry`, or `province`.
    #[serde(default = "default_cluster")]
    pub cluster: String,
}

fn default_outcome() -> String {
    "DebtFC".to_string()
}

fn default_policy_year() -> i32 {
    2021
}

/// The standard firm-control set shared by the baseline design and the
/// annual cross-sections.
pub fn standard_controls() -> Vec<String> {
    ["Size", "Lev", "ROA", "Liquid", "Top5", "TobinQ", "ListAge"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn default_fe() -> String {
    "four_way".to_string()
}

fn default_cluster() -> String {
    "firm".to_string()
}

impl Default for DidSection {
    fn default() -> Self {
        DidSection {
            outcome: default_outcome(),
            policy_year: default_policy_year(),
            controls: standard_controls(),
            fixed_effects: default_fe(),
            cluster: default_cluster(),
        }
    }
}

/// Robustness toggles; everything defaults to off.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessSection {
    /// Propensity-score-matched reweighting.
    pub psm: bool,
    /// Neighbors per treated unit.
    pub psm_k: usize,
    /// Probability-scale caliper.
    pub psm_caliper: f64,
    /// Matching covariates; empty uses the baseline controls.
    pub psm_covariates: Vec<String>,
    /// Entropy-balanced reweighting (year by year over the window).
    pub eb: bool,
    /// Balance tolerance on every covariate gap.
    pub eb_tol: f64,
    /// Balancing covariates; empty uses the baseline controls.
    pub eb_covariates: Vec<String>,
    /// Two-stage selection correction.
    pub heckman: bool,
    /// Selection indicator column.
    pub heckman_selected: String,
    /// Excluded instrument column.
    pub heckman_instrument: String,
    /// Further selection controls.
    pub heckman_controls: Vec<String>,
    /// Placebo permutations; 0 disables the stage.
    pub placebo: usize,
    /// Event-study decomposition.
    pub event_study: bool,
    /// Event window as (earliest, latest) event time.
    pub event_window: (i32, i32),
    /// Omitted reference event time.
    pub event_omitted: i32,
    /// Continuous-intensity designs (raw and standardized).
    pub intensity: bool,
    /// Grouped-intensity designs (median split and terciles).
    pub quantile: bool,
    /// Industry-standardized difference as an alternative residual.
    pub z_difference: bool,
    /// Strict assignment rule as an alternative treatment.
    pub strict: bool,
    /// Calendar years excluded from the sample in a re-estimation.
    pub exclude_years: Vec<i32>,
    /// Extra controls added in a re-estimation.
    pub policy_controls: Vec<String>,
}

impl Default for RobustnessSection {
    fn default() -> Self {
        RobustnessSection {
            psm: false,
            psm_k: 1,
            psm_caliper: 0.05,
            psm_covariates: Vec::new(),
            eb: false,
            eb_tol: 1e-8,
            eb_covariates: Vec::new(),
            heckman: false,
            heckman_selected: "selected".to_string(),
            heckman_instrument: "IT_ratio".to_string(),
            heckman_controls: vec!["no_entry".to_string()],
            placebo: 0,
            event_study: false,
            event_window: (-4, 3),
            event_omitted: -1,
            intensity: false,
            quantile: false,
            z_difference: false,
            strict: false,
            exclude_years: Vec::new(),
            policy_controls: Vec::new(),
        }
    }
}

/// Joint multi-outcome system.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurSection {
    /// Run the joint system stage.
    pub enabled: bool,
    /// Outcome columns, each regressed on the constructed interaction.
    pub outcomes: Vec<String>,
    /// Z-score outcomes before demeaning.
    pub standardize: bool,
    /// Iterate the GLS step to convergence.
    pub iterate: bool,
    /// Standard-error mode: `gls` or `robust`.
    pub vcov: String,
    /// Absorbed effects: `firm_year`, `four_way`, or `none`.
    pub fixed_effects: String,
    /// Signs of the cross-equation equality restriction; empty skips it.
    pub equality_signs: Vec<f64>,
}

impl Default for SurSection {
    fn default() -> Self {
        SurSection {
            enabled: false,
            outcomes: ["DebtFC", "DebtFlow", "AIWord", "AIPatent"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            standardize: true,
            iterate: false,
            vcov: "robust".to_string(),
            fixed_effects: "firm_year".to_string(),
            equality_signs: vec![1.0, 1.0, -1.0, 1.0],
        }
    }
}

/// Moderation designs.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModerationSection {
    /// Moderator columns, each interacted with the treatment effect.
    pub moderators: Vec<String>,
}

/// Subsample split comparisons.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeterogeneitySection {
    /// Split variables (median split on pre-period firm means).
    pub splits: Vec<String>,
    /// Permutations for the gap test; 0 reports the observed gap only.
    pub n_perm: usize,
}

/// Report contents.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Variables of the descriptive and correlation tables; empty derives
    /// outcome + controls + washing measures.
    pub variables: Vec<String>,
}

impl PipelineConfig {
    /// Parse a TOML document.
    pub fn from_toml_str(text: &str) -> Result<PipelineConfig> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read and parse a TOML config file.
    pub fn from_path(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config `{}`: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Validate cross-field constraints, reporting every problem at once.
    pub fn validate(&self) -> Result<()> {
        fn message(e: Error) -> String {
            match e {
                Error::Config(m) | Error::Data(m) | Error::Estimation(m) => m,
            }
        }
        let mut problems = Vec::new();
        match (&self.input.csv, &self.input.synthetic) {
            (None, None) => problems.push("input: neither `csv` nor `synthetic` is set".to_string()),
            (Some(_), Some(_)) => {
                problems.push("input: `csv` and `synthetic` are mutually exclusive".to_string())
            }
            _ => {}
        }
        if let Some(name) = &self.input.synthetic {
            if let Err(e) = Preset::parse(name) {
                problems.push(format!("input: {}", message(e)));
            }
        }
        if let Err(e) = parse_patent_mode(&self.washing.patent_mode) {
            problems.push(format!("washing: {}", message(e)));
        }
        if let Err(e) = parse_assignment_mode_str(&self.washing.treatment) {
            problems.push(format!("washing: {}", message(e)));
        }
        if let Err(e) = parse_fixed_effects(&self.did.fixed_effects, false) {
            problems.push(format!("did: {}", message(e)));
        }
        if let Err(e) = parse_cluster(&self.did.cluster) {
            problems.push(format!("did: {}", message(e)));
        }
        if self.robustness.psm && self.robustness.psm_k == 0 {
            problems.push("robustness: psm_k must be at least 1".to_string());
        }
        if self.robustness.event_study && self.robustness.event_window.0 > self.robustness.event_window.1
        {
            problems.push(format!(
                "robustness: event window ({}, {}) is empty",
                self.robustness.event_window.0, self.robustness.event_window.1
            ));
        }
        if self.sur.enabled {
            if self.sur.outcomes.len() < 2 {
                problems.push("sur: need at least 2 outcomes".to_string());
            }
            if !self.sur.equality_signs.is_empty()
                && self.sur.equality_signs.len() != self.sur.outcomes.len()
            {
                problems.push(format!(
                    "sur: {} equality signs for {} outcomes",
                    self.sur.equality_signs.len(),
                    self.sur.outcomes.len()
                ));
            }
            if let Err(e) = parse_vcov(&self.sur.vcov) {
                problems.push(format!("sur: {}", message(e)));
            }
            if let Err(e) = parse_fixed_effects(&self.sur.fixed_effects, true) {
                problems.push(format!("sur: {}", message(e)));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    /// The pre-policy window: configured years, or the three years before
    /// the policy year.
    pub fn pre_years(&self) -> Vec<i32> {
        if self.washing.pre_years.is_empty() {
            (self.did.policy_year - 3..self.did.policy_year).collect()
        } else {
            let mut years = self.washing.pre_years.clone();
            years.sort_unstable();
            years.dedup();
            years
        }
    }

    /// The synthetic generator configuration implied by this config.
    pub fn to_dgp(&self) -> Result<DgpConfig> {
        let name = self
            .input
            .synthetic
            .as_deref()
            .ok_or_else(|| Error::config("input is not synthetic".to_string()))?;
        let mut dgp = DgpConfig::preset(Preset::parse(name)?);
        dgp.seed = self.seed;
        dgp.policy_year = self.did.policy_year;
        if let Some(n) = self.input.n_firms {
            dgp.n_firms = n;
        }
        if let Some(y) = self.input.start_year {
            dgp.start_year = y;
        }
        if let Some(y) = self.input.end_year {
            dgp.end_year = y;
        }
        if let Some(b) = self.input.beta_treat {
            dgp.beta_treat = b;
        }
        if let Some(s) = self.input.treated_share {
            dgp.treated_share = s;
        }
        if let Some(s) = self.input.noise_sd {
            dgp.noise_sd = s;
        }
        if let Some(b) = self.input.beta_interaction {
            dgp.beta_interaction = b;
        }
        Ok(dgp)
    }

    /// CSV key-column schema with configured overrides.
    pub fn schema(&self) -> PanelSchema {
        let mut schema = PanelSchema::default();
        if let Some(s) = &self.input.firm_column {
            schema.firm = s.clone();
        }
        if let Some(s) = &self.input.year_column {
            schema.year = s.clone();
        }
        if let Some(s) = &self.input.industry_column {
            schema.industry = s.clone();
        }
        if let Some(s) = &self.input.province_column {
            schema.province = s.clone();
        }
        schema
    }

    /// Hash of everything that can influence reported numbers. Scheduling
    /// fields (threads) and the output path are excluded, so runs that must
    /// agree byte-for-byte share a hash.
    pub fn result_hash(&self) -> Result<u64> {
        let mut c = self.clone();
        c.threads = 0;
        c.output = PathBuf::new();
        let canon = to_canonical_json(&c)?;
        Ok(stats::fnv1a64(canon.as_bytes()))
    }

    fn baseline_spec(&self) -> Result<DidSpec> {
        Ok(DidSpec {
            outcome: self.did.outcome.clone(),
            treat: TREAT_COLUMN.to_string(),
            policy_year: self.did.policy_year,
            controls: self.did.controls.clone(),
            fe: parse_fixed_effects(&self.did.fixed_effects, false)?
                .expect("did fixed effects are never `none`"),
            cluster: parse_cluster(&self.did.cluster)?,
        })
    }
}

/// Name of the constructed treatment column written into the panel.
pub const TREAT_COLUMN: &str = "treat_hat";
/// Name of the constructed residual column written into the panel.
pub const RESIDUAL_COLUMN: &str = "wash_residual";

fn parse_patent_mode(s: &str) -> Result<PatentMode> {
    match s {
        "flow" => Ok(PatentMode::Flow),
        "stock" => Ok(PatentMode::Stock),
        "application" => Ok(PatentMode::Application),
        other => Err(Error::config(format!(
            "unknown patent mode `{other}`; expected flow, stock, or application"
        ))),
    }
}

fn parse_assignment_mode_str(s: &str) -> Result<AssignmentMode> {
    match s {
        "mean" => Ok(AssignmentMode::Mean),
        "strict" => Ok(AssignmentMode::Strict),
        "single_year" => Ok(AssignmentMode::SingleYear),
        other => Err(Error::config(format!(
            "unknown treatment rule `{other}`; expected mean, strict, or single_year"
        ))),
    }
}

/// `None` encodes "no absorbed effects" (allowed only where stated).
fn parse_fixed_effects(s: &str, allow_none: bool) -> Result<Option<FixedEffectSpec>> {
    match s {
        "firm_year" => Ok(Some(FixedEffectSpec::firm_year())),
        "four_way" => Ok(Some(FixedEffectSpec::four_way())),
        "none" if allow_none => Ok(None),
        other => Err(Error::config(format!(
            "unknown fixed-effects choice `{other}`; expected firm_year or four_way{}",
            if allow_none { " or none" } else { "" }
        ))),
    }
}

fn parse_cluster(s: &str) -> Result<KeyVar> {
    match s {
        "firm" => Ok(KeyVar::Firm),
        "year" => Ok(KeyVar::Year),
        "industry" => Ok(KeyVar::Industry),
        "province" => Ok(KeyVar::Province),
        other => Err(Error::config(format!(
            "unknown cluster key `{other}`; expected firm, year, industry, or province"
        ))),
    }
}

fn parse_vcov(s: &str) -> Result<VcovMode> {
    match s {
        "gls" => Ok(VcovMode::Gls),
        "robust" => Ok(VcovMode::Robust),
        other => Err(Error::config(format!(
            "unknown vcov mode `{other}`; expected gls or robust"
        ))),
    }
}

/// Effective worker count: the environment override when present, else the
/// configured value. 0 means the library default.
pub fn effective_threads(configured: usize, env_override: Option<&str>) -> Result<usize> {
    match env_override {
        None => Ok(configured),
        Some(raw) => raw.trim().parse::<usize>().map_err(|_| {
            Error::config(format!(
                "PANELCAUSAL_THREADS must be a non-negative integer, got `{raw}`"
            ))
        }),
    }
}

/// Prefix an error's message with the failing stage's name.
fn stage<T>(name: &str, result: Result<T>) -> Result<T> {
    result.map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("[stage {name}] {m}")),
        Error::Data(m) => Error::Data(format!("[stage {name}] {m}")),
        Error::Estimation(m) => Error::Estimation(format!("[stage {name}] {m}")),
    })
}

/// Everything the estimation stages share: the screened panel with the
/// constructed residual and treatment columns, the assignment table, and
/// the baseline design.
pub struct Prepared {
    /// Screened panel with [`RESIDUAL_COLUMN`] and [`TREAT_COLUMN`] set.
    pub panel: PanelDataset,
    /// Rows in the raw input.
    pub n_rows_loaded: usize,
    /// Screening-stage row counts.
    pub screening: ScreeningReport,
    /// Per-firm residual summaries and rule labels.
    pub assignment: AssignmentTable,
    /// Counts under the active rule.
    pub assignment_summary: AssignmentSummary,
    /// Residual persistence diagnostics; absent for one-year windows.
    pub persistence: Option<PersistenceStats>,
    /// Baseline design against the constructed treatment.
    pub spec: DidSpec,
    /// The pre-policy window.
    pub pre_years: Vec<i32>,
    /// Human-readable input description for the manifest.
    pub input_label: String,
}

/// Counts of the treatment assignment under the active rule.
#[derive(Debug, Clone, Serialize)]
pub struct AssignmentSummary {
    /// Active rule.
    pub mode: AssignmentMode,
    /// Firms with at least one window residual.
    pub n_firms: usize,
    /// Labeled treated.
    pub treated: usize,
    /// Labeled control.
    pub control: usize,
    /// Firms the rule could not label.
    pub unlabeled: usize,
    /// Firms without any window residual.
    pub no_residual_firms: usize,
    /// The window.
    pub pre_years: Vec<i32>,
}

/// Load the configured input without screening it. Returns the raw panel
/// and a human-readable input label.
pub fn load_raw(cfg: &PipelineConfig) -> Result<(PanelDataset, String)> {
    stage("load", load_input(cfg))
}

/// Load, screen, wash, and assign — the shared front half of every stage.
pub fn prepare(cfg: &PipelineConfig) -> Result<Prepared> {
    let (raw, input_label) = load_raw(cfg)?;
    let n_rows_loaded = raw.n_rows();
    let (mut panel, screening) =
        stage("screen", screen(&raw, &cfg.screening.to_config()))?;

    let pre_years = cfg.pre_years();
    let residuals = stage("wash", wash(cfg, &panel, &pre_years))?;
    stage("wash", panel.set_column(RESIDUAL_COLUMN, residuals.clone()))?;
    let persistence = if pre_years.len() >= 2 {
        Some(stage("wash", persistence_stats(&panel, &residuals))?)
    } else {
        None
    };

    let mode = parse_assignment_mode_str(&cfg.washing.treatment)?;
    let assignment = stage("assign", assign_treatment(&panel, &residuals, &pre_years))?;
    let treat = stage("assign", assignment.treatment_column(&panel, mode))?;
    stage("assign", panel.set_column(TREAT_COLUMN, treat))?;
    let assignment_summary = summarize_assignment(&assignment, mode);

    let spec = cfg.baseline_spec()?;
    Ok(Prepared {
        panel,
        n_rows_loaded,
        screening,
        assignment,
        assignment_summary,
        persistence,
        spec,
        pre_years,
        input_label,
    })
}

fn load_input(cfg: &PipelineConfig) -> Result<(PanelDataset, String)> {
    match (&cfg.input.csv, &cfg.input.synthetic) {
        (Some(path), None) => {
            let panel = load_panel(path, &cfg.schema())?;
            Ok((panel, format!("csv:{}", path.display())))
        }
        (None, Some(name)) => {
            let dgp = cfg.to_dgp()?;
            let (panel, _truth) = generate_panel(&dgp)?;
            Ok((panel, format!("synthetic:{name}")))
        }
        _ => Err(Error::config(
            "input must set exactly one of `csv` or `synthetic`".to_string(),
        )),
    }
}

fn wash(
    cfg: &PipelineConfig,
    panel: &PanelDataset,
    pre_years: &[i32],
) -> Result<Vec<Option<f64>>> {
    let mut spec = DecouplingSpec::new(pre_years.to_vec());
    spec.word = cfg.washing.word.clone();
    spec.patent_mode = parse_patent_mode(&cfg.washing.patent_mode)?;
    if !cfg.washing.controls.is_empty() {
        spec.controls = cfg.washing.controls.clone();
    }
    decoupling_residuals(panel, &spec)
}

fn summarize_assignment(table: &AssignmentTable, mode: AssignmentMode) -> AssignmentSummary {
    let mut treated = 0;
    let mut control = 0;
    let mut unlabeled = 0;
    for firm in &table.firms {
        let label = match mode {
            AssignmentMode::Mean => Some(firm.treat_mean),
            AssignmentMode::Strict => match firm.treat_strict {
                StrictStatus::Treated => Some(true),
                StrictStatus::Control => Some(false),
                StrictStatus::Excluded => None,
            },
            AssignmentMode::SingleYear => firm.treat_single_year,
        };
        match label {
            Some(true) => treated += 1,
            Some(false) => control += 1,
            None => unlabeled += 1,
        }
    }
    AssignmentSummary {
        mode,
        n_firms: table.firms.len(),
        treated,
        control,
        unlabeled,
        no_residual_firms: table.excluded_firms.len(),
        pre_years: table.pre_years.clone(),
    }
}

/// One re-estimated design in the robustness table.
#[derive(Debug, Clone, Serialize)]
pub struct RobustnessRow {
    /// What was varied.
    pub design: String,
    /// Reported regressor.
    pub term: String,
    /// Point estimate.
    pub estimate: f64,
    /// Cluster-robust standard error.
    pub se: f64,
    /// t statistic.
    pub t: f64,
    /// Two-sided p-value.
    pub p: f64,
    /// Observations used.
    pub n_obs: usize,
    /// Clusters used.
    pub n_clusters: usize,
}

fn robustness_row(design: &str, term: &str, fit: &RegressionResult) -> Result<RobustnessRow> {
    let c = fit.coefficient(term)?;
    Ok(RobustnessRow {
        design: design.to_string(),
        term: term.to_string(),
        estimate: c.estimate,
        se: c.se,
        t: c.t,
        p: c.p,
        n_obs: fit.n_obs,
        n_clusters: fit.n_clusters,
    })
}

/// A reweighted re-estimation with its balance diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct WeightedFitReport {
    /// Producing method.
    pub method: WeightMethod,
    /// Weighted baseline fit.
    pub fit: RegressionResult,
    /// Standardized bias before/after, on the estimation panel.
    pub balance: Vec<crate::causal::BalanceRow>,
    /// Treated units left unmatched (matching only).
    pub unmatched_treated: usize,
    /// Firms outside every balancing sample (yearly balancing only).
    pub defaulted_firms: Vec<String>,
}

/// Selection-correction results shaped for reporting.
#[derive(Debug, Clone, Serialize)]
pub struct HeckmanReport {
    /// Probit selection equation.
    pub first_stage: MleResult,
    /// Coefficient on the correction term.
    pub imr_coefficient: f64,
    /// Two-sided p-value of the correction term.
    pub imr_p: f64,
    /// Ratio rows clamped in the deep tail.
    pub clamped_rows: usize,
    /// Corrected outcome equation.
    pub second_stage: RegressionResult,
}

impl HeckmanReport {
    fn from_result(h: HeckmanResult) -> HeckmanReport {
        HeckmanReport {
            first_stage: h.first_stage,
            imr_coefficient: h.imr_coefficient,
            imr_p: h.imr_p,
            clamped_rows: h.clamped_rows,
            second_stage: h.second_stage,
        }
    }
}

/// One moderated design.
#[derive(Debug, Clone, Serialize)]
pub struct ModerationReport {
    /// Moderator column.
    pub moderator: String,
    /// Full fit with the moderator main effect and interaction.
    pub fit: RegressionResult,
}

/// One subsample split comparison.
#[derive(Debug, Clone, Serialize)]
pub struct SplitReport {
    /// Split variable.
    pub split: String,
    /// Subsample fits and the permutation test on the gap.
    pub comparison: SplitComparison,
}

/// Joint-system results: the fit plus its independence and restriction
/// tests.
#[derive(Debug, Clone, Serialize)]
pub struct SurReport {
    /// Fitted system.
    pub fit: SurFit,
    /// Independence test on the residual correlations.
    pub independence: IndependenceTest,
    /// Joint zero restriction across equations.
    pub joint_zero: WaldTest,
    /// Signed cross-equation equality restriction, when configured.
    pub equality: Option<WaldTest>,
    /// Per-equation zero tests with family-size adjustment.
    pub individual: Vec<WaldTest>,
}

/// The complete study output: manifest, per-stage tables, and every
/// configured result, all serializable to canonical JSON.
#[derive(Debug, Clone, Serialize)]
pub struct ReportBundle {
    /// Run identification.
    pub manifest: RunManifest,
    /// Screening-stage row counts.
    pub screening: ScreeningReport,
    /// Summary statistics per variable.
    pub descriptive: Vec<DescriptiveRow>,
    /// Pairwise correlations; absent with fewer than two variables.
    pub correlation: Option<CorrelationTable>,
    /// Treatment assignment counts.
    pub assignment: AssignmentSummary,
    /// Residual persistence diagnostics.
    pub persistence: Option<PersistenceStats>,
    /// Baseline design fit.
    pub baseline: RegressionResult,
    /// Re-estimated design variants.
    pub robustness: Vec<RobustnessRow>,
    /// Event-study decomposition.
    pub event_study: Option<EventStudyResult>,
    /// Permutation inference.
    pub placebo: Option<PlaceboResult>,
    /// Matched reweighting.
    pub psm: Option<WeightedFitReport>,
    /// Entropy-balanced reweighting.
    pub eb: Option<WeightedFitReport>,
    /// Selection correction.
    pub heckman: Option<HeckmanReport>,
    /// Moderation designs.
    pub moderation: Vec<ModerationReport>,
    /// Subsample comparisons.
    pub heterogeneity: Vec<SplitReport>,
    /// Joint multi-outcome system.
    pub sur: Option<SurReport>,
}

/// Run identification: enough to reproduce and to detect config drift.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    /// Hash of the result-relevant configuration.
    pub config_hash: String,
    /// Master seed.
    pub seed: u64,
    /// Crate version that produced the report.
    pub toolkit_version: String,
    /// Input description.
    pub input: String,
    /// Rows in the raw input.
    pub n_rows_loaded: usize,
    /// Rows after screening.
    pub n_rows_screened: usize,
}

/// Execute the configured study end to end.
///
/// Stages run in a fixed order — load, screen, wash, assign, estimate,
/// robustness, sur, report — and the first failure aborts with the stage
/// name tagged onto the error. Identical (config, seed) pairs produce
/// byte-identical reports for any worker count.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<ReportBundle> {
    cfg.validate()?;
    let threads = effective_threads(
        cfg.threads,
        std::env::var("PANELCAUSAL_THREADS").ok().as_deref(),
    )?;
    if threads == 0 {
        return execute(cfg);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config(format!("cannot build a {threads}-thread pool: {e}")))?;
    pool.install(|| execute(cfg))
}

fn execute(cfg: &PipelineConfig) -> Result<ReportBundle> {
    let prep = prepare(cfg)?;
    let baseline = stage("estimate", did_estimate(&prep.panel, &prep.spec, None))?;

    let rob = &cfg.robustness;
    let mut robustness = Vec::new();

    // Alternative treatment rules.
    if rob.strict {
        let fit = stage("robustness", strict_fit(&prep))?;
        robustness.push(stage("robustness", robustness_row("strict assignment", INTERACTION, &fit))?);
    }
    if rob.z_difference {
        let fit = stage("robustness", z_difference_fit(cfg, &prep))?;
        robustness.push(stage(
            "robustness",
            robustness_row("z-difference assignment", INTERACTION, &fit),
        )?);
    }

    // Sample and control variants.
    if !rob.exclude_years.is_empty() {
        let fit = stage("robustness", exclude_years_fit(&prep, &rob.exclude_years))?;
        let label = format!(
            "excluding years {}",
            rob.exclude_years.iter().map(|y| y.to_string()).collect::<Vec<_>>().join(", ")
        );
        robustness.push(stage("robustness", robustness_row(&label, INTERACTION, &fit))?);
    }
    if !rob.policy_controls.is_empty() {
        let mut spec = prep.spec.clone();
        for extra in &rob.policy_controls {
            if !spec.controls.contains(extra) {
                spec.controls.push(extra.clone());
            }
        }
        let fit = stage("robustness", did_estimate(&prep.panel, &spec, None))?;
        robustness.push(stage(
            "robustness",
            robustness_row("policy controls added", INTERACTION, &fit),
        )?);
    }

    // Intensity designs.
    if rob.intensity {
        for (scheme, label) in [
            (IntensityScheme::Raw, "intensity (raw)"),
            (IntensityScheme::Standardized, "intensity (standardized)"),
        ] {
            let fit = stage("robustness", intensity_fit(&prep, scheme))?;
            robustness.push(stage("robustness", robustness_row(label, "intensity_post", &fit))?);
        }
    }
    if rob.quantile {
        let rows = stage("robustness", quantile_fits(&prep))?;
        robustness.extend(rows);
    }

    // Reweighted designs.
    let psm = if rob.psm {
        let rep = stage("robustness", psm_fit(cfg, &prep))?;
        robustness.push(stage(
            "robustness",
            robustness_row("matched reweighting", INTERACTION, &rep.fit),
        )?);
        Some(rep)
    } else {
        None
    };
    let eb = if rob.eb {
        let rep = stage("robustness", eb_fit(cfg, &prep))?;
        robustness.push(stage(
            "robustness",
            robustness_row("entropy-balanced reweighting", INTERACTION, &rep.fit),
        )?);
        Some(rep)
    } else {
        None
    };

    // Selection correction.
    let heckman = if rob.heckman {
        let selection = SelectionSpec {
            selected: rob.heckman_selected.clone(),
            instrument: rob.heckman_instrument.clone(),
            controls: rob.heckman_controls.clone(),
        };
        let result = stage(
            "robustness",
            heckman_two_stage(&prep.panel, &selection, &prep.spec),
        )?;
        robustness.push(stage(
            "robustness",
            robustness_row("selection corrected", INTERACTION, &result.second_stage),
        )?);
        Some(HeckmanReport::from_result(result))
    } else {
        None
    };

    // Event study and permutation inference.
    let event = if rob.event_study {
        let window = EventWindow {
            min: rob.event_window.0,
            max: rob.event_window.1,
            omitted: rob.event_omitted,
        };
        Some(stage("robustness", event_study(&prep.panel, &prep.spec, window))?)
    } else {
        None
    };
    let placebo = if rob.placebo > 0 {
        Some(stage(
            "robustness",
            placebo_permutation(&prep.panel, &prep.spec, rob.placebo, cfg.seed),
        )?)
    } else {
        None
    };

    // Moderation and heterogeneity.
    let mut moderation = Vec::new();
    for name in &cfg.moderation.moderators {
        let fit = stage("robustness", moderated_did(&prep.panel, &prep.spec, name, true))?;
        moderation.push(ModerationReport { moderator: name.clone(), fit });
    }
    let mut heterogeneity = Vec::new();
    for name in &cfg.heterogeneity.splits {
        let split_seed = cfg.seed ^ stats::fnv1a64(name.as_bytes());
        let comparison = stage(
            "robustness",
            subsample_compare(&prep.panel, &prep.spec, name, cfg.heterogeneity.n_perm, split_seed),
        )?;
        heterogeneity.push(SplitReport { split: name.clone(), comparison });
    }

    // Joint system.
    let sur = if cfg.sur.enabled {
        Some(stage("sur", sur_stage(cfg, &prep))?)
    } else {
        None
    };

    // Report assembly.
    let variables = report_variables(cfg, &prep.panel);
    let refs: Vec<&str> = variables.iter().map(|s| s.as_str()).collect();
    let descriptive = stage("report", descriptive_table(&prep.panel, &refs))?;
    let correlation = if refs.len() >= 2 {
        Some(stage("report", correlation_table(&prep.panel, &refs))?)
    } else {
        None
    };
    let manifest = RunManifest {
        config_hash: format!("{:016x}", cfg.result_hash()?),
        seed: cfg.seed,
        toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        input: prep.input_label.clone(),
        n_rows_loaded: prep.n_rows_loaded,
        n_rows_screened: prep.panel.n_rows(),
    };

    Ok(ReportBundle {
        manifest,
        screening: prep.screening,
        descriptive,
        correlation,
        assignment: prep.assignment_summary,
        persistence: prep.persistence,
        baseline,
        robustness,
        event_study: event,
        placebo,
        psm,
        eb,
        heckman,
        moderation,
        heterogeneity,
        sur,
    })
}

/// Variables of the descriptive and correlation tables.
fn report_variables(cfg: &PipelineConfig, panel: &PanelDataset) -> Vec<String> {
    if !cfg.report.variables.is_empty() {
        return cfg.report.variables.clone();
    }
    let mut vars = vec![cfg.did.outcome.clone()];
    vars.extend(cfg.did.controls.iter().cloned());
    vars.push(cfg.washing.word.clone());
    vars.push(
        match cfg.washing.patent_mode.as_str() {
            "application" => "AIPatentApp",
            _ => "AIPatent",
        }
        .to_string(),
    );
    let mut seen = std::collections::BTreeSet::new();
    vars.retain(|v| panel.has_column(v) && seen.insert(v.clone()));
    vars
}

fn strict_fit(prep: &Prepared) -> Result<RegressionResult> {
    let mut panel = prep.panel.clone();
    let treat = prep.assignment.treatment_column(&panel, AssignmentMode::Strict)?;
    panel.set_column("treat_strict", treat)?;
    let mut spec = prep.spec.clone();
    spec.treat = "treat_strict".to_string();
    did_estimate(&panel, &spec, None)
}

fn z_difference_fit(cfg: &PipelineConfig, prep: &Prepared) -> Result<RegressionResult> {
    let patent = match parse_patent_mode(&cfg.washing.patent_mode)? {
        PatentMode::Application => "AIPatentApp",
        _ => "AIPatent",
    };
    let zd = z_difference(&prep.panel, &cfg.washing.word, patent, &prep.pre_years)?;
    let table = assign_treatment(&prep.panel, &zd.z_diff, &prep.pre_years)?;
    let mut panel = prep.panel.clone();
    let treat = table.treatment_column(&panel, AssignmentMode::Mean)?;
    panel.set_column("treat_zdiff", treat)?;
    let mut spec = prep.spec.clone();
    spec.treat = "treat_zdiff".to_string();
    did_estimate(&panel, &spec, None)
}

fn exclude_years_fit(prep: &Prepared, exclude: &[i32]) -> Result<RegressionResult> {
    let years = prep.panel.years();
    let keep: Vec<usize> =
        (0..prep.panel.n_rows()).filter(|&i| !exclude.contains(&years[i])).collect();
    if keep.is_empty() {
        return Err(Error::data("year exclusion removed every row".to_string()));
    }
    did_estimate(&prep.panel.subset(&keep)?, &prep.spec, None)
}

/// Map per-firm values (aligned with the assignment table) onto panel rows.
fn firm_values_to_rows(
    table: &AssignmentTable,
    values: &[f64],
    panel: &PanelDataset,
) -> Vec<Option<f64>> {
    let mut by_code: Vec<Option<f64>> = vec![None; panel.n_firms()];
    for (firm, &v) in table.firms.iter().zip(values) {
        by_code[firm.firm_code] = Some(v);
    }
    panel.firm_codes().iter().map(|&c| by_code[c]).collect()
}

/// Fit the baseline design with arbitrary firm-level regressors interacted
/// with the post indicator in place of the single treated-post interaction.
fn post_interaction_fit(
    prep: &Prepared,
    regressors: &[(String, Vec<Option<f64>>)],
) -> Result<RegressionResult> {
    let panel = &prep.panel;
    let spec = &prep.spec;
    let mut needed: Vec<&str> = vec![&spec.outcome];
    needed.extend(spec.controls.iter().map(|s| s.as_str()));
    let rows: Vec<usize> = panel
        .complete_rows(&needed)?
        .into_iter()
        .filter(|&i| regressors.iter().all(|(_, v)| v[i].is_some()))
        .collect();
    if rows.is_empty() {
        return Err(Error::data("no complete rows for the interaction design".to_string()));
    }
    let y = panel.dense_at(&spec.outcome, &rows)?;
    let years = panel.years();
    let mut x: Vec<(String, Vec<f64>)> = Vec::with_capacity(regressors.len() + spec.controls.len());
    for (name, values) in regressors {
        let col: Vec<f64> = rows
            .iter()
            .map(|&i| {
                let post = if years[i] >= spec.policy_year { 1.0 } else { 0.0 };
                values[i].unwrap() * post
            })
            .collect();
        x.push((name.clone(), col));
    }
    for name in &spec.controls {
        x.push((name.clone(), panel.dense_at(name, &rows)?));
    }
    let effects = spec.fe.resolve(panel, &rows)?;
    let (cluster_all, _) = panel.key_codes(spec.cluster);
    let cluster: Vec<usize> = rows.iter().map(|&i| cluster_all[i]).collect();
    ols_cluster(&y, &x, &effects, &cluster, None)
}

fn intensity_fit(prep: &Prepared, scheme: IntensityScheme) -> Result<RegressionResult> {
    let values = intensity_and_quantiles(&prep.assignment, scheme)?;
    let col = firm_values_to_rows(&prep.assignment, &values, &prep.panel);
    post_interaction_fit(prep, &[("intensity_post".to_string(), col)])
}

fn quantile_fits(prep: &Prepared) -> Result<Vec<RobustnessRow>> {
    let mut rows = Vec::new();

    // Median split of the positive deviations: group 1 (non-positive) is
    // the reference; groups 2 and 3 get their own post interactions.
    let median = intensity_and_quantiles(&prep.assignment, IntensityScheme::MedianSplit)?;
    let terms: Vec<(String, Vec<Option<f64>>)> = [(2.0, "msplit_low_post"), (3.0, "msplit_high_post")]
        .iter()
        .map(|&(code, name)| {
            let indicator: Vec<f64> =
                median.iter().map(|&g| if g == code { 1.0 } else { 0.0 }).collect();
            (name.to_string(), firm_values_to_rows(&prep.assignment, &indicator, &prep.panel))
        })
        .collect();
    let fit = post_interaction_fit(prep, &terms)?;
    rows.push(robustness_row("median split: lower positive", "msplit_low_post", &fit)?);
    rows.push(robustness_row("median split: upper positive", "msplit_high_post", &fit)?);

    // Terciles of the positive deviations, same reference group.
    let terciles = intensity_and_quantiles(&prep.assignment, IntensityScheme::Terciles)?;
    let terms: Vec<(String, Vec<Option<f64>>)> =
        [(2.0, "tercile1_post"), (3.0, "tercile2_post"), (4.0, "tercile3_post")]
            .iter()
            .map(|&(code, name)| {
                let indicator: Vec<f64> =
                    terciles.iter().map(|&g| if g == code { 1.0 } else { 0.0 }).collect();
                (name.to_string(), firm_values_to_rows(&prep.assignment, &indicator, &prep.panel))
            })
            .collect();
    let fit = post_interaction_fit(prep, &terms)?;
    for (i, term) in ["tercile1_post", "tercile2_post", "tercile3_post"].iter().enumerate() {
        rows.push(robustness_row(&format!("tercile {} of positive deviation", i + 1), term, &fit)?);
    }
    Ok(rows)
}

fn covariates_or_controls<'a>(configured: &'a [String], spec: &'a DidSpec) -> Vec<&'a str> {
    if configured.is_empty() {
        spec.controls.iter().map(|s| s.as_str()).collect()
    } else {
        configured.iter().map(|s| s.as_str()).collect()
    }
}

fn psm_fit(cfg: &PipelineConfig, prep: &Prepared) -> Result<WeightedFitReport> {
    let covars = covariates_or_controls(&cfg.robustness.psm_covariates, &prep.spec);
    let mut columns: Vec<&str> = vec![TREAT_COLUMN];
    columns.extend(&covars);
    let firm_data = pre_period_means(&prep.panel, &columns, &prep.pre_years)?;
    let firm_weights = psm_match(
        &firm_data,
        TREAT_COLUMN,
        &covars,
        cfg.robustness.psm_k,
        cfg.robustness.psm_caliper,
        cfg.seed,
    )?;
    let row_weights = firm_weights_to_rows(&firm_data, &firm_weights.weights, &prep.panel)?;
    let balance = balance_diagnostics(&prep.panel, TREAT_COLUMN, &covars, Some(&row_weights))?;
    let weights = WeightVector {
        weights: row_weights,
        method: WeightMethod::Psm,
        diagnostics: balance.clone(),
        unmatched_treated: firm_weights.unmatched_treated,
        defaulted_firms: Vec::new(),
    };
    let fit = did_estimate(&prep.panel, &prep.spec, Some(&weights))?;
    Ok(WeightedFitReport {
        method: WeightMethod::Psm,
        fit,
        balance,
        unmatched_treated: firm_weights.unmatched_treated,
        defaulted_firms: Vec::new(),
    })
}

fn eb_fit(cfg: &PipelineConfig, prep: &Prepared) -> Result<WeightedFitReport> {
    let covars = covariates_or_controls(&cfg.robustness.eb_covariates, &prep.spec);
    let weights = entropy_balance_yearly(
        &prep.panel,
        TREAT_COLUMN,
        &covars,
        &prep.pre_years,
        cfg.robustness.eb_tol,
    )?;
    let fit = did_estimate(&prep.panel, &prep.spec, Some(&weights))?;
    Ok(WeightedFitReport {
        method: WeightMethod::Eb,
        fit,
        balance: weights.diagnostics.clone(),
        unmatched_treated: 0,
        defaulted_firms: weights.defaulted_firms.clone(),
    })
}

fn sur_stage(cfg: &PipelineConfig, prep: &Prepared) -> Result<SurReport> {
    let mut panel = prep.panel.clone();
    let treat = panel.column(TREAT_COLUMN)?.to_vec();
    let years = panel.years().to_vec();
    let tp: Vec<Option<f64>> = treat
        .iter()
        .zip(&years)
        .map(|(t, &y)| {
            t.map(|t| if y >= prep.spec.policy_year { t } else { 0.0 })
        })
        .collect();
    panel.set_column(INTERACTION, tp)?;

    let system = SurSystem {
        equations: cfg
            .sur
            .outcomes
            .iter()
            .map(|o| SurEquation::new(o, &[INTERACTION]))
            .collect(),
        standardize_outcomes: cfg.sur.standardize,
        fe: parse_fixed_effects(&cfg.sur.fixed_effects, true)?
            .unwrap_or_else(|| FixedEffectSpec::new(vec![])),
        vcov: parse_vcov(&cfg.sur.vcov)?,
        iterate: cfg.sur.iterate,
    };
    let fit = sur_fit(&panel, &system)?;
    let independence = breusch_pagan_independence(&fit)?;
    let joint_zero = joint_zero_wald(&fit, INTERACTION)?;
    let individual = individual_zero_wald(&fit, INTERACTION, true)?;
    let equality = if cfg.sur.equality_signs.is_empty() {
        None
    } else {
        Some(signed_equality_wald(&fit, INTERACTION, &cfg.sur.equality_signs)?)
    };
    Ok(SurReport { fit, independence, joint_zero, equality, individual })
}

// ---------------------------------------------------------------------------
// Report rendering
// ---------------------------------------------------------------------------

fn fmt(v: f64) -> String {
    crate::report::format_significant(v, 6)
}

fn coefficient_rows(table: &mut Table, prefix: &[String], coefficients: &[Coefficient]) {
    for c in coefficients {
        let mut row = prefix.to_vec();
        row.extend([
            c.name.clone(),
            fmt(c.estimate),
            fmt(c.se),
            fmt(c.t),
            fmt(c.p),
            stats::stars(c.p).to_string(),
        ]);
        table.push_row(row);
    }
}

impl ReportBundle {
    /// Render every present stage as a named table, in a fixed order.
    pub fn tables(&self) -> Vec<Table> {
        let mut tables = Vec::new();

        let mut t = Table::new(
            "descriptive",
            &["variable", "n", "mean", "sd", "min", "median", "max", "kurtosis", "skewness"],
        );
        for r in &self.descriptive {
            t.push_row(vec![
                r.variable.clone(),
                r.n.to_string(),
                fmt(r.mean),
                fmt(r.sd),
                fmt(r.min),
                fmt(r.median),
                fmt(r.max),
                fmt(r.kurtosis),
                fmt(r.skewness),
            ]);
        }
        tables.push(t);

        if let Some(c) = &self.correlation {
            let mut headers = vec!["variable".to_string()];
            headers.extend(c.variables.iter().cloned());
            let headers: Vec<&str> = headers.iter().map(|s| s.as_str()).collect();
            let mut t = Table::new("correlation", &headers);
            for (i, name) in c.variables.iter().enumerate() {
                let mut row = vec![name.clone()];
                for j in 0..c.variables.len() {
                    row.push(if i == j { "1".to_string() } else { starred(c.r[i][j], c.p[i][j]) });
                }
                t.push_row(row);
            }
            tables.push(t);
        }

        let mut t = Table::new("screening", &["measure", "value"]);
        for (measure, value) in [
            ("rows before", self.screening.n_before),
            ("dropped by sector exclusion", self.screening.dropped_sector),
            ("dropped by status flag", self.screening.dropped_flag),
            ("dropped by required columns", self.screening.dropped_required),
            ("cells imputed", self.screening.imputed_cells),
            ("cells winsorized", self.screening.winsorized_cells),
            ("rows after", self.screening.n_after),
        ] {
            t.push_row(vec![measure.to_string(), value.to_string()]);
        }
        tables.push(t);

        let mut t = Table::new("assignment", &["measure", "value"]);
        let a = &self.assignment;
        t.push_row(vec!["rule".to_string(), format!("{:?}", a.mode).to_lowercase()]);
        t.push_row(vec!["assignable firms".to_string(), a.n_firms.to_string()]);
        t.push_row(vec!["treated".to_string(), a.treated.to_string()]);
        t.push_row(vec!["control".to_string(), a.control.to_string()]);
        t.push_row(vec!["unlabeled".to_string(), a.unlabeled.to_string()]);
        t.push_row(vec!["firms without residuals".to_string(), a.no_residual_firms.to_string()]);
        t.push_row(vec![
            "window".to_string(),
            a.pre_years.iter().map(|y| y.to_string()).collect::<Vec<_>>().join(" "),
        ]);
        tables.push(t);

        if let Some(p) = &self.persistence {
            let mut t = Table::new("persistence", &["measure", "value"]);
            t.push_row(vec!["spearman".to_string(), fmt(p.spearman)]);
            t.push_row(vec!["consecutive pairs".to_string(), p.n_pairs.to_string()]);
            let tier = ["low", "mid", "high"];
            for (i, from) in tier.iter().enumerate() {
                for (j, to) in tier.iter().enumerate() {
                    t.push_row(vec![format!("p({from} -> {to})"), fmt(p.transition[i][j])]);
                }
            }
            tables.push(t);
        }

        let mut t =
            Table::new("baseline", &["term", "estimate", "se", "t", "p", "significance"]);
        coefficient_rows(&mut t, &[], &self.baseline.coefficients);
        tables.push(t);

        if !self.robustness.is_empty() {
            let mut t = Table::new(
                "robustness",
                &["design", "term", "estimate", "se", "t", "p", "significance", "n_obs", "n_clusters"],
            );
            for r in &self.robustness {
                t.push_row(vec![
                    r.design.clone(),
                    r.term.clone(),
                    fmt(r.estimate),
                    fmt(r.se),
                    fmt(r.t),
                    fmt(r.p),
                    stats::stars(r.p).to_string(),
                    r.n_obs.to_string(),
                    r.n_clusters.to_string(),
                ]);
            }
            tables.push(t);
        }

        if let Some(e) = &self.event_study {
            let mut t = Table::new(
                "event_study",
                &["event_time", "estimate", "se", "p", "ci_low", "ci_high", "significance"],
            );
            for est in &e.estimates {
                t.push_row(vec![
                    est.tau.to_string(),
                    fmt(est.estimate),
                    fmt(est.se),
                    fmt(est.p),
                    fmt(est.ci.0),
                    fmt(est.ci.1),
                    stats::stars(est.p).to_string(),
                ]);
            }
            tables.push(t);
        }

        if let Some(p) = &self.placebo {
            let mut t = Table::new("placebo_summary", &["measure", "value"]);
            t.push_row(vec!["actual estimate".to_string(), fmt(p.actual_estimate)]);
            t.push_row(vec!["permutation p".to_string(), fmt(p.p_value)]);
            t.push_row(vec!["draws".to_string(), p.placebo_estimates.len().to_string()]);
            t.push_row(vec!["skipped draws".to_string(), p.skipped_draws.to_string()]);
            tables.push(t);

            let mut t = Table::new("placebo_draws", &["draw", "estimate"]);
            for (i, est) in p.placebo_estimates.iter().enumerate() {
                t.push_row(vec![i.to_string(), fmt(*est)]);
            }
            tables.push(t);
        }

        for (name, report) in [("psm_balance", &self.psm), ("eb_balance", &self.eb)] {
            if let Some(rep) = report {
                let mut t =
                    Table::new(name, &["covariate", "bias_before_pct", "bias_after_pct"]);
                for b in &rep.balance {
                    t.push_row(vec![b.covariate.clone(), fmt(b.before), fmt(b.after)]);
                }
                tables.push(t);
            }
        }

        if let Some(h) = &self.heckman {
            let mut t = Table::new(
                "heckman_selection",
                &["term", "estimate", "se", "t", "p", "significance"],
            );
            coefficient_rows(&mut t, &[], &h.first_stage.coefficients);
            tables.push(t);

            let mut t = Table::new(
                "heckman_outcome",
                &["term", "estimate", "se", "t", "p", "significance"],
            );
            coefficient_rows(&mut t, &[], &h.second_stage.coefficients);
            tables.push(t);
        }

        if !self.moderation.is_empty() {
            let mut t = Table::new(
                "moderation",
                &["moderator", "term", "estimate", "se", "t", "p", "significance"],
            );
            for m in &self.moderation {
                coefficient_rows(&mut t, &[m.moderator.clone()], &m.fit.coefficients);
            }
            tables.push(t);
        }

        if !self.heterogeneity.is_empty() {
            let mut t = Table::new(
                "heterogeneity",
                &["split", "low_estimate", "high_estimate", "gap", "gap_p", "n_low_firms", "n_high_firms"],
            );
            for s in &self.heterogeneity {
                let low = s.comparison.low.coefficient(INTERACTION);
                let high = s.comparison.high.coefficient(INTERACTION);
                t.push_row(vec![
                    s.split.clone(),
                    low.map(|c| fmt(c.estimate)).unwrap_or_default(),
                    high.map(|c| fmt(c.estimate)).unwrap_or_default(),
                    fmt(s.comparison.observed_gap),
                    s.comparison.p_value.map(fmt).unwrap_or_default(),
                    s.comparison.n_low.to_string(),
                    s.comparison.n_high.to_string(),
                ]);
            }
            tables.push(t);
        }

        if let Some(s) = &self.sur {
            let mut t = Table::new(
                "sur_coefficients",
                &["equation", "term", "estimate", "se", "z", "p", "significance"],
            );
            for eq in &s.fit.equations {
                for c in &eq.coefficients {
                    t.push_row(vec![
                        eq.outcome.clone(),
                        c.name.clone(),
                        fmt(c.estimate),
                        fmt(c.se),
                        fmt(c.z),
                        fmt(c.p),
                        stats::stars(c.p).to_string(),
                    ]);
                }
            }
            tables.push(t);

            let outcomes: Vec<String> =
                s.fit.equations.iter().map(|e| e.outcome.clone()).collect();
            let mut headers = vec!["equation".to_string()];
            headers.extend(outcomes.iter().cloned());
            let headers: Vec<&str> = headers.iter().map(|h| h.as_str()).collect();
            let mut t = Table::new("sur_residual_correlations", &headers);
            for (i, name) in outcomes.iter().enumerate() {
                let mut row = vec![name.clone()];
                for j in 0..outcomes.len() {
                    row.push(fmt(s.fit.residual_correlations[i][j]));
                }
                t.push_row(row);
            }
            tables.push(t);

            let mut t = Table::new("sur_tests", &["test", "statistic", "df", "p", "adjusted_p"]);
            t.push_row(vec![
                "independence of equation errors".to_string(),
                fmt(s.independence.statistic),
                s.independence.df.to_string(),
                fmt(s.independence.p),
                String::new(),
            ]);
            let mut wald_row = |w: &WaldTest| {
                t.push_row(vec![
                    w.label.clone(),
                    fmt(w.statistic),
                    w.df.to_string(),
                    fmt(w.p),
                    w.adjusted_p.map(fmt).unwrap_or_default(),
                ]);
            };
            wald_row(&s.joint_zero);
            if let Some(eq) = &s.equality {
                wald_row(eq);
            }
            for w in &s.individual {
                wald_row(w);
            }
            tables.push(t);
        }

        tables
    }

    /// Render the full report as one markdown document.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("# Study report\n\n");
        out.push_str(&format!(
            "- input: {}\n- seed: {}\n- config hash: {}\n- toolkit version: {}\n- rows loaded: {}\n- rows after screening: {}\n\n",
            self.manifest.input,
            self.manifest.seed,
            self.manifest.config_hash,
            self.manifest.toolkit_version,
            self.manifest.n_rows_loaded,
            self.manifest.n_rows_screened,
        ));
        for table in self.tables() {
            out.push_str(&format!("## {}\n\n", table.name.replace('_', " ")));
            out.push_str(&table.to_markdown());
            out.push('\n');
        }
        out.push_str("Significance: *** p < 0.01, ** p < 0.05, * p < 0.1.\n");
        out
    }
}

/// Which report formats to write.
#[derive(Debug, Clone, Copy)]
pub struct EmitFormats {
    /// Canonical JSON of the whole bundle (`report.json`).
    pub json: bool,
    /// One CSV per table.
    pub csv: bool,
    /// One markdown document (`report.md`).
    pub markdown: bool,
}

impl Default for EmitFormats {
    fn default() -> Self {
        EmitFormats { json: true, csv: true, markdown: true }
    }
}

/// Write the report into `dir`, returning the paths written (sorted).
///
/// Emission is deterministic: the same bundle always produces the same
/// bytes, and re-emitting overwrites with identical content.
pub fn emit_report(bundle: &ReportBundle, dir: &Path, formats: EmitFormats) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| {
        Error::data(format!("cannot create output directory `{}`: {e}", dir.display()))
    })?;
    let write = |path: &Path, content: &str| -> Result<()> {
        std::fs::write(path, content)
            .map_err(|e| Error::data(format!("cannot write `{}`: {e}", path.display())))
    };
    let mut written = Vec::new();
    if formats.json {
        let path = dir.join("report.json");
        let mut json = to_canonical_json(bundle)?;
        json.push('\n');
        write(&path, &json)?;
        written.push(path);
    }
    if formats.csv {
        for table in bundle.tables() {
            let path = dir.join(format!("{}.csv", table.name));
            write(&path, &table.to_csv()?)?;
            written.push(path);
        }
    }
    if formats.markdown {
        let path = dir.join("report.md");
        write(&path, &bundle.to_markdown())?;
        written.push(path);
    }
    written.sort();
    Ok(written)
}
