//! Binary-outcome maximum likelihood (probit and logit) with cluster-robust
//! covariance and average marginal effects.
//!
//! Estimation is Newton–Raphson with the expected information (Fisher
//! scoring) and step-halving; convergence requires the score max-norm below
//! 1e-8 or a step below 1e-10. Diverging coefficients are reported as perfect
//! separation rather than returned.
//!
//! # References
//!
//! - Greene, "Econometric Analysis", ch. 17 (binary choice, BHHH/Fisher).
//! - Wooldridge (2010), ch. 15 (average partial effects, delta method).

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::stats;

/// Link function for the binary model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Link {
    /// Gaussian link.
    Probit,
    /// Logistic link.
    Logit,
}

impl Link {
    fn prob(&self, eta: f64) -> f64 {
        match self {
            Link::Probit => stats::normal_cdf(eta),
            Link::Logit => 1.0 / (1.0 + (-eta).exp()),
        }
    }

    /// Density of the link at eta (dP/d eta).
    fn density(&self, eta: f64) -> f64 {
        match self {
            Link::Probit => stats::normal_pdf(eta),
            Link::Logit => {
                let p = self.prob(eta);
                p * (1.0 - p)
            }
        }
    }

    /// Derivative of the density (d^2 P / d eta^2).
    fn density_prime(&self, eta: f64) -> f64 {
        match self {
            Link::Probit => -eta * stats::normal_pdf(eta),
            Link::Logit => {
                let p = self.prob(eta);
                p * (1.0 - p) * (1.0 - 2.0 * p)
            }
        }
    }
}

/// Fitted binary MLE.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MleResult {
    /// Coefficients (intercept first, named `const`), with cluster-robust
    /// standard errors and normal-approximation p-values.
    pub coefficients: Vec<super::ols::Coefficient>,
    /// Cluster-robust covariance, coefficient order.
    #[serde(skip)]
    pub vcov: DMatrix<f64>,
    /// Maximized log-likelihood.
    pub log_likelihood: f64,
    /// McFadden pseudo R-squared, 1 - logL / logL(intercept only).
    pub pseudo_r2: f64,
    /// Link used.
    pub link: Link,
    /// Newton iterations used.
    pub iterations: usize,
    /// Observations.
    pub n_obs: usize,
    /// Clusters.
    pub n_clusters: usize,
}

impl MleResult {
    /// Coefficient by name.
    pub fn coefficient(&self, name: &str) -> Result<&super::ols::Coefficient> {
        self.coefficients
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::config(format!("no coefficient named `{name}`")))
    }

    /// Linear index x'beta for columns given in the same order as the fit
    /// (the intercept is handled internally).
    pub fn linear_index(&self, x: &[Vec<f64>]) -> Result<Vec<f64>> {
        if x.len() + 1 != self.coefficients.len() {
            return Err(Error::config(format!(
                "prediction needs {} columns, got {}",
                self.coefficients.len() - 1,
                x.len()
            )));
        }
        let n = x.first().map_or(0, |c| c.len());
        let mut eta = vec![self.coefficients[0].estimate; n];
        for (j, col) in x.iter().enumerate() {
            if col.len() != n {
                return Err(Error::config("prediction columns differ in length".to_string()));
            }
            let b = self.coefficients[j + 1].estimate;
            for (e, v) in eta.iter_mut().zip(col) {
                *e += b * v;
            }
        }
        Ok(eta)
    }

    /// Predicted probabilities for columns in fit order.
    pub fn predict_prob(&self, x: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(self.linear_index(x)?.into_iter().map(|e| self.link.prob(e)).collect())
    }
}

const MAX_ITER: usize = 200;
const GRAD_TOL: f64 = 1e-8;
const STEP_TOL: f64 = 1e-10;
const SEPARATION_BOUND: f64 = 1e3;
const PROB_FLOOR: f64 = 1e-12;

/// Fit a probit or logit by maximum likelihood.
///
/// An intercept named `const` is prepended automatically; `x` holds the named
/// non-constant regressors. Standard errors are the cluster sandwich with the
/// G/(G-1) factor; p-values use the normal approximation.
pub fn binary_mle(
    y: &[f64],
    x: &[(String, Vec<f64>)],
    link: Link,
    cluster: &[usize],
) -> Result<MleResult> {
    let n = y.len();
    if n == 0 {
        return Err(Error::data("binary MLE on an empty sample".to_string()));
    }
    if cluster.len() != n {
        return Err(Error::config(format!(
            "{} cluster codes for {n} rows",
            cluster.len()
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
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::data("binary outcome must contain only 0 and 1".to_string()));
    }
    let ones = y.iter().filter(|&&v| v == 1.0).count();
    if ones == 0 || ones == n {
        return Err(Error::data(
            "binary outcome has a single class; nothing to estimate".to_string(),
        ));
    }

    let k = x.len() + 1;
    if n <= k {
        return Err(Error::estimation(format!(
            "insufficient observations: {n} rows for {k} parameters"
        )));
    }
    let design: Vec<Vec<f64>> = std::iter::once(vec![1.0; n])
        .chain(x.iter().map(|(_, c)| c.clone()))
        .collect();

    let log_lik = |beta: &DVector<f64>| -> f64 {
        let mut ll = 0.0;
        for i in 0..n {
            let eta: f64 = design.iter().zip(beta.iter()).map(|(c, b)| c[i] * b).sum();
            let p = link.prob(eta).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            ll += if y[i] == 1.0 { p.ln() } else { (1.0 - p).ln() };
        }
        ll
    };

    let mut beta = DVector::zeros(k);
    let mut ll = log_lik(&beta);
    let mut iterations = 0;
    let mut converged = false;

    while iterations < MAX_ITER {
        iterations += 1;

        // Score and expected information at the current beta.
        let mut grad = DVector::zeros(k);
        let mut info = DMatrix::zeros(k, k);
        for i in 0..n {
            let eta: f64 = design.iter().zip(beta.iter()).map(|(c, b)| c[i] * b).sum();
            let p = link.prob(eta).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            let d = link.density(eta);
            let s = d * (y[i] - p) / (p * (1.0 - p));
            let w = d * d / (p * (1.0 - p));
            for a in 0..k {
                grad[a] += s * design[a][i];
                for b in a..k {
                    info[(a, b)] += w * design[a][i] * design[b][i];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                info[(a, b)] = info[(b, a)];
            }
        }

        if grad.amax() < GRAD_TOL {
            converged = true;
            break;
        }

        let chol = Cholesky::new(info.clone()).ok_or_else(|| {
            Error::estimation(
                "singular information matrix; regressors may be collinear".to_string(),
            )
        })?;
        let mut step = chol.solve(&grad);

        // Step-halving keeps the likelihood monotone.
        let mut improved = false;
        for _ in 0..40 {
            let candidate = &beta + &step;
            let ll_new = log_lik(&candidate);
            if ll_new >= ll - 1e-12 {
                beta = candidate;
                ll = ll_new;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            return Err(Error::estimation(
                "binary MLE line search failed to improve the likelihood".to_string(),
            ));
        }
        if beta.amax() > SEPARATION_BOUND {
            return Err(Error::estimation(
                "perfect separation detected: coefficients diverge".to_string(),
            ));
        }
        if step.amax() < STEP_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::estimation(format!(
            "binary MLE did not converge in {MAX_ITER} iterations"
        )));
    }

    // A maximum at which every observation is classified perfectly means the
    // likelihood has no interior maximizer: the iterations merely stalled on
    // a separating hyperplane inflated until the link saturated.
    let perfectly_classified = (0..n).all(|i| {
        let eta: f64 = design.iter().zip(beta.iter()).map(|(c, b)| c[i] * b).sum();
        let p = link.prob(eta);
        if y[i] == 1.0 {
            p > 1.0 - 1e-6
        } else {
            p < 1e-6
        }
    });
    if perfectly_classified {
        return Err(Error::estimation(
            "perfect separation detected: the likelihood has no interior maximum".to_string(),
        ));
    }

    // Final information and per-cluster scores for the sandwich.
    let mut info: DMatrix<f64> = DMatrix::zeros(k, k);
    let mut cluster_ids: Vec<usize> = cluster.to_vec();
    cluster_ids.sort_unstable();
    cluster_ids.dedup();
    let g = cluster_ids.len();
    if g < 2 {
        return Err(Error::data(format!(
            "cluster-robust inference needs at least 2 clusters, found {g}"
        )));
    }
    let pos: std::collections::HashMap<usize, usize> =
        cluster_ids.iter().enumerate().map(|(p, &c)| (c, p)).collect();
    let mut scores: DMatrix<f64> = DMatrix::zeros(g, k);
    for i in 0..n {
        let eta: f64 = design.iter().zip(beta.iter()).map(|(c, b)| c[i] * b).sum();
        let p = link.prob(eta).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        let d = link.density(eta);
        let s = d * (y[i] - p) / (p * (1.0 - p));
        let w = d * d / (p * (1.0 - p));
        let gi = pos[&cluster[i]];
        for a in 0..k {
            scores[(gi, a)] += s * design[a][i];
            for b in a..k {
                info[(a, b)] += w * design[a][i] * design[b][i];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            info[(a, b)] = info[(b, a)];
        }
    }
    let bread = Cholesky::new(info)
        .ok_or_else(|| Error::estimation("singular information at the optimum".to_string()))?
        .inverse();
    let meat = scores.transpose() * &scores;
    let factor = g as f64 / (g as f64 - 1.0);
    let mut vcov: DMatrix<f64> = &bread * meat * &bread * factor;
    for a in 0..k {
        for b in (a + 1)..k {
            let v = 0.5 * (vcov[(a, b)] + vcov[(b, a)]);
            vcov[(a, b)] = v;
            vcov[(b, a)] = v;
        }
    }

    // Null model (intercept only) fits the sample share exactly.
    let share = ones as f64 / n as f64;
    let ll0 = n as f64 * (share * share.ln() + (1.0 - share) * (1.0 - share).ln());
    let pseudo_r2 = 1.0 - ll / ll0;

    let names: Vec<String> =
        std::iter::once("const".to_string()).chain(x.iter().map(|(n, _)| n.clone())).collect();
    let coefficients = (0..k)
        .map(|a| {
            let se = vcov[(a, a)].max(0.0).sqrt();
            let z = if se > 0.0 { beta[a] / se } else { f64::INFINITY };
            super::ols::Coefficient {
                name: names[a].clone(),
                estimate: beta[a],
                se,
                t: z,
                p: stats::normal_p_two_sided(z),
            }
        })
        .collect();

    Ok(MleResult {
        coefficients,
        vcov,
        log_likelihood: ll,
        pseudo_r2,
        link,
        iterations,
        n_obs: n,
        n_clusters: g,
    })
}

/// One average marginal effect.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MarginalEffect {
    /// Regressor name.
    pub name: String,
    /// Average marginal effect on the outcome probability.
    pub effect: f64,
    /// Delta-method standard error (on the cluster-robust vcov).
    pub se: f64,
    /// z statistic.
    pub z: f64,
    /// Two-sided normal p-value.
    pub p: f64,
    /// True when computed as a 0-to-1 discrete change.
    pub binary: bool,
}

/// Average marginal effects of every regressor of a fitted binary model.
///
/// `x` must be the columns the model was fitted on, in the same order.
/// Regressors whose observed values are all 0 or 1 get the discrete-change
/// effect; continuous regressors get the density-weighted derivative. Both
/// use the delta method on the model's cluster-robust covariance.
pub fn marginal_effects(fit: &MleResult, x: &[(String, Vec<f64>)]) -> Result<Vec<MarginalEffect>> {
    let k = fit.coefficients.len();
    if x.len() + 1 != k {
        return Err(Error::config(format!(
            "marginal effects need the {} fitted columns, got {}",
            k - 1,
            x.len()
        )));
    }
    for (j, (name, _)) in x.iter().enumerate() {
        if fit.coefficients[j + 1].name != *name {
            return Err(Error::config(format!(
                "column `{name}` does not match fitted coefficient `{}`",
                fit.coefficients[j + 1].name
            )));
        }
    }
    let cols: Vec<&Vec<f64>> = x.iter().map(|(_, c)| c).collect();
    let n = cols.first().map_or(0, |c| c.len());
    if n == 0 {
        return Err(Error::data("marginal effects on an empty sample".to_string()));
    }
    let beta: Vec<f64> = fit.coefficients.iter().map(|c| c.estimate).collect();
    let eta: Vec<f64> = (0..n)
        .map(|i| beta[0] + cols.iter().zip(&beta[1..]).map(|(c, b)| c[i] * b).sum::<f64>())
        .collect();
    let link = fit.link;

    let mut out = Vec::with_capacity(x.len());
    for (j, (name, col)) in x.iter().enumerate() {
        let is_binary = col.iter().all(|&v| v == 0.0 || v == 1.0);
        let mut jac = DVector::zeros(k);
        let effect = if is_binary {
            // Discrete change: average P(eta with x_j = 1) - P(eta with x_j = 0).
            let bj = beta[j + 1];
            let mut eff = 0.0;
            for i in 0..n {
                let eta0 = eta[i] - col[i] * bj;
                let eta1 = eta0 + bj;
                eff += link.prob(eta1) - link.prob(eta0);
                let d1 = link.density(eta1);
                let d0 = link.density(eta0);
                // d/d beta_l: density difference times x_l, with x_j set to 1/0.
                jac[0] += d1 - d0;
                for (l, cl) in cols.iter().enumerate() {
                    let xv = if l == j { (1.0, 0.0) } else { (cl[i], cl[i]) };
                    jac[l + 1] += d1 * xv.0 - d0 * xv.1;
                }
            }
            jac /= n as f64;
            eff / n as f64
        } else {
            // Derivative: beta_j * average density.
            let bj = beta[j + 1];
            let mut dbar = 0.0;
            for i in 0..n {
                let d = link.density(eta[i]);
                let dp = link.density_prime(eta[i]);
                dbar += d;
                jac[0] += bj * dp;
                for (l, cl) in cols.iter().enumerate() {
                    jac[l + 1] += bj * dp * cl[i];
                }
            }
            dbar /= n as f64;
            jac /= n as f64;
            jac[j + 1] += dbar;
            bj * dbar
        };

        let var = (jac.transpose() * &fit.vcov * &jac)[(0, 0)].max(0.0);
        let se = var.sqrt();
        let z = if se > 0.0 { effect / se } else { f64::INFINITY };
        out.push(MarginalEffect {
            name: name.clone(),
            effect,
            se,
            z,
            p: stats::normal_p_two_sided(z),
            binary: is_binary,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn simulate_probit(n: usize, b0: f64, b1: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let normal = StandardNormal;
        let x: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&v| {
                let u: f64 = normal.sample(&mut rng);
                if b0 + b1 * v + u > 0.0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        (y, x)
    }

    #[test]
    fn probit_gradient_vanishes_at_the_optimum() {
        let (y, x) = simulate_probit(400, -0.2, 0.9, 21);
        let cluster: Vec<usize> = (0..y.len()).collect();
        let fit =
            binary_mle(&y, &[("x".to_string(), x.clone())], Link::Probit, &cluster).unwrap();

        // Recompute the score at the reported optimum.
        let b0 = fit.coefficient("const").unwrap().estimate;
        let b1 = fit.coefficient("x").unwrap().estimate;
        let mut g = [0.0, 0.0];
        for i in 0..y.len() {
            let eta = b0 + b1 * x[i];
            let p = stats::normal_cdf(eta);
            let s = stats::normal_pdf(eta) * (y[i] - p) / (p * (1.0 - p));
            g[0] += s;
            g[1] += s * x[i];
        }
        assert!(g[0].abs() < 1e-8 && g[1].abs() < 1e-8, "score {g:?}");
    }

    #[test]
    fn logit_matches_closed_form_on_grouped_data() {
        // Two cells (x = 0 and x = 1) make the MLE a pair of log-odds.
        let y = vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        let x = vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        let cluster: Vec<usize> = (0..8).collect();
        let fit = binary_mle(&y, &[("x".to_string(), x)], Link::Logit, &cluster).unwrap();
        // P(y=1|x=0) = 1/2 -> log odds 0; P(y=1|x=1) = 3/4 -> log odds ln 3.
        assert_relative_eq!(fit.coefficient("const").unwrap().estimate, 0.0, epsilon = 1e-6);
        assert_relative_eq!(
            fit.coefficient("x").unwrap().estimate,
            3.0_f64.ln(),
            epsilon = 1e-6
        );
    }

    #[test]
    fn perfect_separation_is_detected() {
        let x: Vec<f64> = (-10..10).map(|i| i as f64 / 2.0).collect();
        let y: Vec<f64> = x.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        let cluster: Vec<usize> = (0..x.len()).collect();
        let err = binary_mle(&y, &[("x".to_string(), x)], Link::Probit, &cluster).unwrap_err();
        assert!(matches!(err, Error::Estimation(ref m) if m.contains("separation")));
    }

    #[test]
    fn single_class_outcome_is_a_data_error() {
        let y = vec![1.0; 10];
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let cluster: Vec<usize> = (0..10).collect();
        let err = binary_mle(&y, &[("x".to_string(), x)], Link::Probit, &cluster).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn ame_matches_central_finite_difference_of_mean_probability() {
        // Oracle: AME_j should equal d/dt mean P(eta + t * x_j) at t = 0 for
        // continuous x_j; evaluate by central difference on the fitted model.
        let (y, x) = simulate_probit(300, 0.1, -0.7, 33);
        let cluster: Vec<usize> = (0..y.len()).collect();
        let cols = vec![("x".to_string(), x.clone())];
        let fit = binary_mle(&y, &cols, Link::Probit, &cluster).unwrap();
        let ames = marginal_effects(&fit, &cols).unwrap();
        let b0 = fit.coefficient("const").unwrap().estimate;
        let b1 = fit.coefficient("x").unwrap().estimate;

        let h = 1e-5;
        let mean_p = |shift: f64| -> f64 {
            x.iter().map(|&v| stats::normal_cdf(b0 + b1 * (v + shift))).sum::<f64>()
                / x.len() as f64
        };
        let fd = (mean_p(h) - mean_p(-h)) / (2.0 * h);
        assert_relative_eq!(ames[0].effect, fd, epsilon = 1e-6);
        assert!(!ames[0].binary);
    }

    #[test]
    fn binary_regressor_gets_discrete_change_effect() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let normal = StandardNormal;
        let n = 500;
        let d: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let y: Vec<f64> = d
            .iter()
            .map(|&v| {
                let u: f64 = normal.sample(&mut rng);
                if -0.3 + 0.8 * v + u > 0.0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let cluster: Vec<usize> = (0..n).collect();
        let cols = vec![("d".to_string(), d)];
        let fit = binary_mle(&y, &cols, Link::Probit, &cluster).unwrap();
        let ames = marginal_effects(&fit, &cols).unwrap();
        assert!(ames[0].binary);

        // Oracle: discrete change of the mean probability.
        let b0 = fit.coefficient("const").unwrap().estimate;
        let b1 = fit.coefficient("d").unwrap().estimate;
        let oracle = stats::normal_cdf(b0 + b1) - stats::normal_cdf(b0);
        assert_relative_eq!(ames[0].effect, oracle, epsilon = 1e-10);
    }

    #[test]
    fn ame_delta_se_matches_finite_difference_jacobian() {
        // Independent oracle for the delta-method SE: numerically
        // differentiate the AME with respect to each coefficient.
        let (y, x) = simulate_probit(250, -0.4, 1.1, 55);
        let cluster: Vec<usize> = (0..y.len()).collect();
        let cols = vec![("x".to_string(), x.clone())];
        let fit = binary_mle(&y, &cols, Link::Probit, &cluster).unwrap();
        let ames = marginal_effects(&fit, &cols).unwrap();

        let ame_at = |b0: f64, b1: f64| -> f64 {
            b1 * x.iter().map(|&v| stats::normal_pdf(b0 + b1 * v)).sum::<f64>() / x.len() as f64
        };
        let b0 = fit.coefficient("const").unwrap().estimate;
        let b1 = fit.coefficient("x").unwrap().estimate;
        let h = 1e-5;
        let j0 = (ame_at(b0 + h, b1) - ame_at(b0 - h, b1)) / (2.0 * h);
        let j1 = (ame_at(b0, b1 + h) - ame_at(b0, b1 - h)) / (2.0 * h);
        let v = &fit.vcov;
        let var = j0 * j0 * v[(0, 0)] + 2.0 * j0 * j1 * v[(0, 1)] + j1 * j1 * v[(1, 1)];
        assert_relative_eq!(ames[0].se, var.sqrt(), epsilon = 1e-6);
    }

    #[test]
    fn pseudo_r2_is_between_zero_and_one_and_increases_with_signal() {
        let (y_weak, x_weak) = simulate_probit(400, 0.0, 0.2, 77);
        let (y_strong, x_strong) = simulate_probit(400, 0.0, 2.0, 78);
        let cl: Vec<usize> = (0..400).collect();
        let weak =
            binary_mle(&y_weak, &[("x".to_string(), x_weak)], Link::Probit, &cl).unwrap();
        let strong =
            binary_mle(&y_strong, &[("x".to_string(), x_strong)], Link::Probit, &cl).unwrap();
        assert!(weak.pseudo_r2 >= 0.0 && weak.pseudo_r2 <= 1.0);
        assert!(strong.pseudo_r2 > weak.pseudo_r2);
    }
}
