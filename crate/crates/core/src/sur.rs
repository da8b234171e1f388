//! Joint estimation of several outcome equations whose errors are
//! correlated across equations, with an error-independence test and
//! cross-equation hypothesis tests.
//!
//! Each equation is demeaned by the shared fixed-effect layout, fit by
//! least squares, and the stage-one residual cross-products feed a feasible
//! generalized-least-squares solve of the stacked system. When every
//! equation carries the same regressor matrix the stacked solve reproduces
//! the equation-wise estimates exactly, so joint estimation is free and the
//! gain is the cross-equation covariance needed for system tests.
//!
//! # References
//!
//! - Zellner (1962), "An efficient method of estimating seemingly
//!   unrelated regressions and tests for aggregation bias".
//! - Breusch & Pagan (1980), "The Lagrange multiplier test and its
//!   applications to model specification in econometrics".
//! - Greene, *Econometric Analysis*, ch. 10 (system estimation).

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::panel::PanelDataset;
use crate::regress::{Absorber, FixedEffectSpec};
use crate::stats;

/// One outcome equation of the system.
#[derive(Debug, Clone, Serialize)]
pub struct SurEquation {
    /// Outcome column.
    pub outcome: String,
    /// Regressor columns (no intercept; one is added automatically when no
    /// fixed effects are absorbed).
    pub regressors: Vec<String>,
}

impl SurEquation {
    /// Equation with the given outcome and regressors.
    pub fn new(outcome: &str, regressors: &[&str]) -> Self {
        SurEquation {
            outcome: outcome.to_string(),
            regressors: regressors.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// How the system covariance matrix is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VcovMode {
    /// Inverse of the generalized-least-squares normal matrix.
    Gls,
    /// Heteroskedasticity-robust sandwich over per-observation scores.
    Robust,
}

/// System layout: equations, outcome scaling, shared fixed effects, and
/// estimation toggles.
#[derive(Debug, Clone, Serialize)]
pub struct SurSystem {
    /// The equations, estimated over one common sample.
    pub equations: Vec<SurEquation>,
    /// Z-score each outcome over the estimation sample before demeaning.
    pub standardize_outcomes: bool,
    /// Fixed effects removed from every column by within-demeaning before
    /// stacking. An empty dimension list means no demeaning (an intercept
    /// is added instead).
    pub fe: FixedEffectSpec,
    /// Covariance mode for the reported standard errors.
    pub vcov: VcovMode,
    /// Iterate the feasible-GLS step to convergence instead of stopping
    /// after one step.
    pub iterate: bool,
}

impl SurSystem {
    /// System over the given equations with the reporting defaults:
    /// standardized outcomes, firm and year effects, one GLS step, and
    /// GLS standard errors.
    pub fn new(equations: Vec<SurEquation>) -> Self {
        SurSystem {
            equations,
            standardize_outcomes: true,
            fe: FixedEffectSpec::firm_year(),
            vcov: VcovMode::Gls,
            iterate: false,
        }
    }
}

/// One estimated coefficient of the stacked system.
#[derive(Debug, Clone, Serialize)]
pub struct SurCoefficient {
    /// Regressor name.
    pub name: String,
    /// Point estimate.
    pub estimate: f64,
    /// System standard error (per the covariance mode).
    pub se: f64,
    /// Normal test statistic.
    pub z: f64,
    /// Two-sided p-value on the normal scale.
    pub p: f64,
}

/// Per-equation slice of the fitted system.
#[derive(Debug, Clone, Serialize)]
pub struct SurEquationFit {
    /// Outcome column.
    pub outcome: String,
    /// Coefficients in regressor order.
    pub coefficients: Vec<SurCoefficient>,
}

/// Fitted system: equation coefficients, error covariance, and the stacked
/// covariance used by the cross-equation tests.
#[derive(Debug, Clone, Serialize)]
pub struct SurFit {
    /// Per-equation coefficient tables.
    pub equations: Vec<SurEquationFit>,
    /// Final estimate of the cross-equation error covariance.
    pub sigma: Vec<Vec<f64>>,
    /// Stage-one residual correlation matrix (the independence-test input).
    pub residual_correlations: Vec<Vec<f64>>,
    /// Rows in the common estimation sample.
    pub n_obs: usize,
    /// Feasible-GLS steps taken (1 unless iteration was requested).
    pub iterations: usize,
    /// Covariance mode behind the standard errors.
    pub vcov_mode: VcovMode,
    /// Stacked coefficient vector, equation blocks in order.
    #[serde(skip)]
    pub(crate) beta: DVector<f64>,
    /// Stacked system covariance.
    #[serde(skip)]
    pub(crate) vcov: DMatrix<f64>,
    /// Start offset of each equation's block in the stacked vector.
    #[serde(skip)]
    block_offsets: Vec<usize>,
}

impl SurFit {
    /// Number of equations.
    pub fn n_equations(&self) -> usize {
        self.equations.len()
    }

    /// Coefficient of `name` in equation `eq`.
    pub fn coefficient(&self, eq: usize, name: &str) -> Result<&SurCoefficient> {
        let fit = self
            .equations
            .get(eq)
            .ok_or_else(|| Error::config(format!("no equation {eq} in the system")))?;
        fit.coefficients.iter().find(|c| c.name == name).ok_or_else(|| {
            Error::config(format!("no coefficient `{name}` in equation for `{}`", fit.outcome))
        })
    }

    /// Position of equation `eq`'s `name` in the stacked coefficient
    /// vector.
    pub fn stacked_index(&self, eq: usize, name: &str) -> Result<usize> {
        let fit = self
            .equations
            .get(eq)
            .ok_or_else(|| Error::config(format!("no equation {eq} in the system")))?;
        let pos = fit
            .coefficients
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| {
                Error::config(format!(
                    "no coefficient `{name}` in equation for `{}`",
                    fit.outcome
                ))
            })?;
        Ok(self.block_offsets[eq] + pos)
    }

    /// Length of the stacked coefficient vector.
    pub fn k_total(&self) -> usize {
        self.beta.len()
    }
}

/// Fit the system on the common complete sample.
///
/// Stage one fits each demeaned equation by least squares; the residual
/// cross-products (divided by the sample size) estimate the error
/// covariance, whose inverse weights the stacked feasible-GLS solve. With
/// `iterate` the covariance and solve alternate until the coefficients
/// stop moving.
pub fn sur_fit(data: &PanelDataset, system: &SurSystem) -> Result<SurFit> {
    let m = system.equations.len();
    if m == 0 {
        return Err(Error::config("the system has no equations".to_string()));
    }
    for eq in &system.equations {
        if eq.regressors.is_empty() {
            return Err(Error::config(format!(
                "equation for `{}` has no regressors",
                eq.outcome
            )));
        }
    }

    // Common sample: complete on every outcome and every regressor.
    let mut needed: Vec<&str> = Vec::new();
    for eq in &system.equations {
        needed.push(&eq.outcome);
        needed.extend(eq.regressors.iter().map(|s| s.as_str()));
    }
    needed.sort_unstable();
    needed.dedup();
    let rows = data.complete_rows(&needed)?;
    let n = rows.len();

    let absorb_fe = !system.fe.dimensions.is_empty();

    // Outcomes (optionally standardized) and the pooled regressor columns.
    let mut outcomes: Vec<Vec<f64>> = Vec::with_capacity(m);
    for eq in &system.equations {
        let mut y = data.dense_at(&eq.outcome, &rows)?;
        if system.standardize_outcomes {
            let mean = stats::mean(&y)?;
            let sd = stats::sample_sd(&y)?;
            if sd <= 1e-12 * mean.abs().max(1.0) {
                return Err(Error::data(format!(
                    "outcome `{}` has no variance to standardize",
                    eq.outcome
                )));
            }
            for v in &mut y {
                *v = (*v - mean) / sd;
            }
        }
        outcomes.push(y);
    }
    let mut pool_names: Vec<&str> = system
        .equations
        .iter()
        .flat_map(|eq| eq.regressors.iter().map(|s| s.as_str()))
        .collect();
    pool_names.sort_unstable();
    pool_names.dedup();
    let mut pool: Vec<Vec<f64>> = pool_names
        .iter()
        .map(|name| data.dense_at(name, &rows))
        .collect::<Result<_>>()?;

    if absorb_fe {
        let effects = system.fe.resolve(data, &rows)?;
        let absorber = Absorber::new(&effects, None)?;
        let mut work: Vec<Vec<f64>> = Vec::with_capacity(m + pool.len());
        work.append(&mut outcomes);
        work.append(&mut pool);
        absorber.partial_out(&mut work)?;
        pool = work.split_off(m);
        outcomes = work;
    }

    // Per-equation design matrices out of the shared pool.
    let find = |name: &str| pool_names.iter().position(|p| *p == name).unwrap();
    let mut designs: Vec<DMatrix<f64>> = Vec::with_capacity(m);
    let mut names: Vec<Vec<String>> = Vec::with_capacity(m);
    for eq in &system.equations {
        let k = eq.regressors.len() + usize::from(!absorb_fe);
        if n <= k {
            return Err(Error::data(format!(
                "{n} rows cannot identify {k} coefficients in the equation for `{}`",
                eq.outcome
            )));
        }
        let mut x = DMatrix::zeros(n, k);
        let mut eq_names = Vec::with_capacity(k);
        let mut col = 0;
        if !absorb_fe {
            x.column_mut(0).fill(1.0);
            eq_names.push("const".to_string());
            col = 1;
        }
        for name in &eq.regressors {
            let values = &pool[find(name)];
            for (i, &v) in values.iter().enumerate() {
                x[(i, col)] = v;
            }
            eq_names.push(name.clone());
            col += 1;
        }
        designs.push(x);
        names.push(eq_names);
    }

    // Stage one: equation-wise least squares and residuals.
    let mut stage1_resid: Vec<DVector<f64>> = Vec::with_capacity(m);
    let mut betas: Vec<DVector<f64>> = Vec::with_capacity(m);
    for (l, x) in designs.iter().enumerate() {
        let y = DVector::from_column_slice(&outcomes[l]);
        let gram = x.transpose() * x;
        let chol = gram.cholesky().ok_or_else(|| {
            Error::estimation(format!(
                "regressors are collinear after demeaning in the equation for `{}`",
                system.equations[l].outcome
            ))
        })?;
        let beta = chol.solve(&(x.transpose() * &y));
        stage1_resid.push(&y - x * &beta);
        betas.push(beta);
    }
    let sigma1 = residual_covariance(&stage1_resid, n);
    let correlations = covariance_to_correlation(&sigma1, &system.equations)?;

    // Feasible GLS, repeated when iteration is requested.
    let offsets: Vec<usize> = {
        let mut acc = 0;
        let mut v = Vec::with_capacity(m);
        for x in &designs {
            v.push(acc);
            acc += x.ncols();
        }
        v
    };
    let k_total = offsets.last().unwrap() + designs[m - 1].ncols();

    let mut sigma = sigma1.clone();
    let mut beta = DVector::zeros(k_total);
    for (l, b) in betas.iter().enumerate() {
        beta.rows_mut(offsets[l], b.len()).copy_from(b);
    }
    let max_steps = if system.iterate { 100 } else { 1 };
    let mut iterations = 0;
    let mut normal: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> = None;
    for _ in 0..max_steps {
        let sigma_inv = invert_sigma(&sigma, &correlations, &system.equations)?;
        let mut a = DMatrix::zeros(k_total, k_total);
        let mut b = DVector::zeros(k_total);
        for l in 0..m {
            for q in 0..m {
                let w = sigma_inv[(l, q)];
                if w == 0.0 {
                    continue;
                }
                let block = designs[l].transpose() * &designs[q] * w;
                let mut target = a.view_mut(
                    (offsets[l], offsets[q]),
                    (designs[l].ncols(), designs[q].ncols()),
                );
                target += &block;
                let yq = DVector::from_column_slice(&outcomes[q]);
                let rhs = designs[l].transpose() * yq * w;
                let mut target = b.rows_mut(offsets[l], designs[l].ncols());
                target += &rhs;
            }
        }
        let chol = a.cholesky().ok_or_else(|| {
            Error::estimation("the stacked system normal matrix is singular".to_string())
        })?;
        let next = chol.solve(&b);
        let delta = (&next - &beta).amax();
        beta = next;
        normal = Some(chol);
        iterations += 1;
        if system.iterate {
            let resid: Vec<DVector<f64>> = (0..m)
                .map(|l| {
                    DVector::from_column_slice(&outcomes[l])
                        - &designs[l] * beta.rows(offsets[l], designs[l].ncols())
                })
                .collect();
            sigma = residual_covariance(&resid, n);
            if delta < 1e-10 {
                break;
            }
        }
    }
    let normal = normal.unwrap();

    // System covariance.
    let gls_vcov = normal.inverse();
    let vcov = match system.vcov {
        VcovMode::Gls => gls_vcov,
        VcovMode::Robust => {
            let sigma_inv = invert_sigma(&sigma, &correlations, &system.equations)?;
            let resid: Vec<DVector<f64>> = (0..m)
                .map(|l| {
                    DVector::from_column_slice(&outcomes[l])
                        - &designs[l] * beta.rows(offsets[l], designs[l].ncols())
                })
                .collect();
            let mut meat = DMatrix::zeros(k_total, k_total);
            let mut score = DVector::zeros(k_total);
            for i in 0..n {
                score.fill(0.0);
                for l in 0..m {
                    let weight: f64 = (0..m).map(|q| sigma_inv[(l, q)] * resid[q][i]).sum();
                    let mut target = score.rows_mut(offsets[l], designs[l].ncols());
                    for (j, v) in designs[l].row(i).iter().enumerate() {
                        target[j] += weight * v;
                    }
                }
                meat += &score * score.transpose();
            }
            &normal.inverse() * meat * normal.inverse()
        }
    };

    // Coefficient tables.
    let mut equations = Vec::with_capacity(m);
    for l in 0..m {
        let mut coefficients = Vec::with_capacity(names[l].len());
        for (j, name) in names[l].iter().enumerate() {
            let idx = offsets[l] + j;
            let estimate = beta[idx];
            let se = vcov[(idx, idx)].max(0.0).sqrt();
            let z = if se > 0.0 { estimate / se } else { f64::INFINITY };
            coefficients.push(SurCoefficient {
                name: name.clone(),
                estimate,
                se,
                z,
                p: stats::normal_p_two_sided(z),
            });
        }
        equations.push(SurEquationFit {
            outcome: system.equations[l].outcome.clone(),
            coefficients,
        });
    }

    Ok(SurFit {
        equations,
        sigma: matrix_rows(&sigma),
        residual_correlations: matrix_rows(&correlations),
        n_obs: n,
        iterations,
        vcov_mode: system.vcov,
        beta,
        vcov,
        block_offsets: offsets,
    })
}

fn residual_covariance(resid: &[DVector<f64>], n: usize) -> DMatrix<f64> {
    let m = resid.len();
    DMatrix::from_fn(m, m, |l, q| resid[l].dot(&resid[q]) / n as f64)
}

fn covariance_to_correlation(
    sigma: &DMatrix<f64>,
    equations: &[SurEquation],
) -> Result<DMatrix<f64>> {
    let m = sigma.nrows();
    for l in 0..m {
        if sigma[(l, l)] <= 0.0 {
            return Err(Error::estimation(format!(
                "equation for `{}` has zero residual variance",
                equations[l].outcome
            )));
        }
    }
    Ok(DMatrix::from_fn(m, m, |l, q| {
        sigma[(l, q)] / (sigma[(l, l)] * sigma[(q, q)]).sqrt()
    }))
}

/// Invert the error covariance, refusing near-singular matrices with a
/// diagnostic naming the offending equation pair.
fn invert_sigma(
    sigma: &DMatrix<f64>,
    correlations: &DMatrix<f64>,
    equations: &[SurEquation],
) -> Result<DMatrix<f64>> {
    match sigma.clone().cholesky() {
        Some(chol) => Ok(chol.inverse()),
        None => {
            let m = sigma.nrows();
            let mut worst = (0, 0, 0.0_f64);
            for l in 0..m {
                for q in 0..l {
                    if correlations[(l, q)].abs() > worst.2 {
                        worst = (l, q, correlations[(l, q)].abs());
                    }
                }
            }
            Err(Error::estimation(format!(
                "the error covariance is singular; highest residual correlation {:.6} between \
                 the equations for `{}` and `{}`",
                worst.2, equations[worst.0].outcome, equations[worst.1].outcome
            )))
        }
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|l| (0..m.ncols()).map(|q| m[(l, q)]).collect()).collect()
}

/// Lagrange-multiplier test of cross-equation error independence.
#[derive(Debug, Clone, Serialize)]
pub struct IndependenceTest {
    /// Test statistic: sample size times the sum of squared pairwise
    /// residual correlations.
    pub statistic: f64,
    /// Degrees of freedom: one per equation pair.
    pub df: usize,
    /// Upper chi-square tail probability.
    pub p: f64,
}

/// Independence test from a fitted system's stage-one residual
/// correlations.
pub fn breusch_pagan_independence(fit: &SurFit) -> Result<IndependenceTest> {
    let m = fit.residual_correlations.len();
    if m < 2 {
        return Err(Error::config("the independence test needs at least 2 equations".to_string()));
    }
    let mut sum = 0.0;
    for l in 0..m {
        for q in 0..l {
            sum += fit.residual_correlations[l][q].powi(2);
        }
    }
    let statistic = fit.n_obs as f64 * sum;
    let df = m * (m - 1) / 2;
    Ok(IndependenceTest { statistic, df, p: stats::chi2_p_upper(statistic, df as f64)? })
}

/// Independence test from raw residual vectors (one per equation).
pub fn breusch_pagan_from_residuals(residuals: &[Vec<f64>]) -> Result<IndependenceTest> {
    let m = residuals.len();
    if m < 2 {
        return Err(Error::config("the independence test needs at least 2 equations".to_string()));
    }
    let n = residuals[0].len();
    if residuals.iter().any(|r| r.len() != n) {
        return Err(Error::data("residual vectors differ in length".to_string()));
    }
    let mut sum = 0.0;
    for l in 0..m {
        for q in 0..l {
            sum += stats::pearson(&residuals[l], &residuals[q])?.powi(2);
        }
    }
    let statistic = n as f64 * sum;
    let df = m * (m - 1) / 2;
    Ok(IndependenceTest { statistic, df, p: stats::chi2_p_upper(statistic, df as f64)? })
}

/// One Wald test of linear restrictions on the stacked coefficients.
#[derive(Debug, Clone, Serialize)]
pub struct WaldTest {
    /// What the restriction says, for reporting.
    pub label: String,
    /// Wald chi-square statistic.
    pub statistic: f64,
    /// Number of restrictions.
    pub df: usize,
    /// Upper chi-square tail probability.
    pub p: f64,
    /// Family-size-adjusted p-value, present on per-member tests of a
    /// family.
    pub adjusted_p: Option<f64>,
}

/// Wald test of `R beta = r` on the stacked system.
///
/// Each row of `r_matrix` is one restriction over the stacked coefficient
/// vector (index equations with [`SurFit::stacked_index`]).
pub fn cross_equation_wald(
    fit: &SurFit,
    label: &str,
    r_matrix: &[Vec<f64>],
    r_rhs: &[f64],
) -> Result<WaldTest> {
    let q = r_matrix.len();
    if q == 0 {
        return Err(Error::config("no restrictions given".to_string()));
    }
    if r_rhs.len() != q {
        return Err(Error::config(format!(
            "{q} restriction rows but {} right-hand sides",
            r_rhs.len()
        )));
    }
    let k = fit.k_total();
    if r_matrix.iter().any(|row| row.len() != k) {
        return Err(Error::config(format!(
            "restriction rows must have {k} entries (the stacked coefficient count)"
        )));
    }
    let r = DMatrix::from_fn(q, k, |i, j| r_matrix[i][j]);
    let gap = &r * &fit.beta - DVector::from_column_slice(r_rhs);
    let middle = &r * &fit.vcov * r.transpose();
    let chol = middle.cholesky().ok_or_else(|| {
        Error::estimation(
            "the restricted covariance is singular; restrictions are redundant".to_string(),
        )
    })?;
    let statistic = gap.dot(&chol.solve(&gap));
    Ok(WaldTest {
        label: label.to_string(),
        statistic,
        df: q,
        p: stats::chi2_p_upper(statistic, q as f64)?,
        adjusted_p: None,
    })
}

/// Joint test that `name` is zero in every equation.
pub fn joint_zero_wald(fit: &SurFit, name: &str) -> Result<WaldTest> {
    let k = fit.k_total();
    let mut rows = Vec::with_capacity(fit.n_equations());
    for eq in 0..fit.n_equations() {
        let mut row = vec![0.0; k];
        row[fit.stacked_index(eq, name)?] = 1.0;
        rows.push(row);
    }
    cross_equation_wald(fit, &format!("{name} = 0 in every equation"), &rows, &vec![
        0.0;
        rows.len()
    ])
}

/// Per-equation tests that `name` is zero, with a Bonferroni-adjusted
/// p-value when requested.
pub fn individual_zero_wald(fit: &SurFit, name: &str, bonferroni: bool) -> Result<Vec<WaldTest>> {
    let k = fit.k_total();
    let m = fit.n_equations();
    let mut tests = Vec::with_capacity(m);
    for eq in 0..m {
        let mut row = vec![0.0; k];
        row[fit.stacked_index(eq, name)?] = 1.0;
        let mut test = cross_equation_wald(
            fit,
            &format!("{name} = 0 in the equation for {}", fit.equations[eq].outcome),
            &[row],
            &[0.0],
        )?;
        if bonferroni {
            test.adjusted_p = Some((test.p * m as f64).min(1.0));
        }
        tests.push(test);
    }
    Ok(tests)
}

/// Test that `name`'s coefficients agree across equations up to the given
/// signs: `signs[l] * beta_l` equal for all `l` (df = equations − 1).
pub fn signed_equality_wald(fit: &SurFit, name: &str, signs: &[f64]) -> Result<WaldTest> {
    let m = fit.n_equations();
    if signs.len() != m {
        return Err(Error::config(format!("{} signs for {m} equations", signs.len())));
    }
    if signs.iter().any(|s| s.abs() != 1.0) {
        return Err(Error::config("signs must be +1 or -1".to_string()));
    }
    if m < 2 {
        return Err(Error::config("equality needs at least 2 equations".to_string()));
    }
    let k = fit.k_total();
    let mut rows = Vec::with_capacity(m - 1);
    for eq in 1..m {
        let mut row = vec![0.0; k];
        row[fit.stacked_index(0, name)?] = signs[0];
        row[fit.stacked_index(eq, name)?] = -signs[eq];
        rows.push(row);
    }
    cross_equation_wald(fit, &format!("signed equality of {name}"), &rows, &vec![0.0; m - 1])
}
