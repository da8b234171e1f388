//! Scalar statistics shared by the estimators and report tables.
//!
//! Distribution functions are delegated to `statrs`; everything here is the
//! glue the rest of the crate needs: moments, interpolated quantiles, ranks,
//! rank correlation, a one-sample Kolmogorov-Smirnov uniformity test, and the
//! significance-star convention used in the output tables.
//!
//! # References
//!
//! - Hyndman & Fan (1996), "Sample Quantiles in Statistical Packages" (the
//!   linear-interpolation definition implemented here).
//! - Stephens (1970), "Use of the Kolmogorov-Smirnov, Cramer-von Mises and
//!   related statistics without extensive tables".

use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    Normal::standard().pdf(z)
}

/// Standard normal distribution function.
pub fn normal_cdf(z: f64) -> f64 {
    Normal::standard().cdf(z)
}

/// Two-sided p-value for a standard-normal test statistic.
pub fn normal_p_two_sided(z: f64) -> f64 {
    if !z.is_finite() {
        return if z.is_nan() { f64::NAN } else { 0.0 };
    }
    (2.0 * (1.0 - normal_cdf(z.abs()))).clamp(0.0, 1.0)
}

/// Two-sided p-value for a t statistic with `df` degrees of freedom.
pub fn t_p_two_sided(t: f64, df: f64) -> Result<f64> {
    if df <= 0.0 {
        return Err(Error::estimation(format!(
            "t distribution requires positive degrees of freedom, got {df}"
        )));
    }
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::estimation(format!("t distribution: {e}")))?;
    Ok((2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0))
}

/// Upper-tail p-value for a chi-squared statistic with `df` degrees of freedom.
pub fn chi2_p_upper(x: f64, df: f64) -> Result<f64> {
    if df <= 0.0 {
        return Err(Error::estimation(format!(
            "chi-squared distribution requires positive degrees of freedom, got {df}"
        )));
    }
    if x <= 0.0 {
        return Ok(1.0);
    }
    let dist = ChiSquared::new(df)
        .map_err(|e| Error::estimation(format!("chi-squared distribution: {e}")))?;
    Ok((1.0 - dist.cdf(x)).clamp(0.0, 1.0))
}

/// Inverse Mills ratio phi(z)/Phi(z), guarded against underflow in the deep
/// left tail where Phi(z) evaluates to zero in double precision.
///
/// Returns `(value, clamped)` where `clamped` reports that the guard fired.
pub fn inverse_mills(z: f64) -> (f64, bool) {
    let cdf = normal_cdf(z);
    if cdf < 1e-300 {
        // Asymptotic expansion: phi/Phi -> -z for z -> -inf.
        (-z, true)
    } else {
        (normal_pdf(z) / cdf, false)
    }
}

/// Mean of a slice. Errors on empty input.
pub fn mean(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::data("mean of empty slice".to_string()));
    }
    Ok(xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Sample variance (n-1 denominator). Errors on fewer than two values.
pub fn sample_variance(xs: &[f64]) -> Result<f64> {
    if xs.len() < 2 {
        return Err(Error::data(format!(
            "sample variance requires at least 2 values, got {}",
            xs.len()
        )));
    }
    let m = mean(xs)?;
    Ok(xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64)
}

/// Sample standard deviation (n-1 denominator).
pub fn sample_sd(xs: &[f64]) -> Result<f64> {
    Ok(sample_variance(xs)?.sqrt())
}

/// Population central moments up to order 4, returned as
/// `(mean, m2, m3, m4)` with the 1/n convention.
fn central_moments(xs: &[f64]) -> Result<(f64, f64, f64, f64)> {
    let m = mean(xs)?;
    let n = xs.len() as f64;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for x in xs {
        let d = x - m;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    Ok((m, m2 / n, m3 / n, m4 / n))
}

/// Skewness with the population-moment convention m3 / m2^(3/2).
pub fn skewness(xs: &[f64]) -> Result<f64> {
    let (_, m2, m3, _) = central_moments(xs)?;
    if m2 <= 0.0 {
        return Err(Error::data("skewness undefined for constant data".to_string()));
    }
    Ok(m3 / m2.powf(1.5))
}

/// Kurtosis with the population-moment convention m4 / m2^2 (a normal
/// distribution has kurtosis 3; no excess correction is applied).
pub fn kurtosis(xs: &[f64]) -> Result<f64> {
    let (_, m2, _, m4) = central_moments(xs)?;
    if m2 <= 0.0 {
        return Err(Error::data("kurtosis undefined for constant data".to_string()));
    }
    Ok(m4 / (m2 * m2))
}

/// Weighted mean with nonnegative weights. Errors when the weights sum to zero.
pub fn weighted_mean(xs: &[f64], ws: &[f64]) -> Result<f64> {
    if xs.len() != ws.len() {
        return Err(Error::config(format!(
            "weighted mean: {} values but {} weights",
            xs.len(),
            ws.len()
        )));
    }
    let wsum: f64 = ws.iter().sum();
    if wsum <= 0.0 {
        return Err(Error::data("weighted mean: weights sum to zero".to_string()));
    }
    Ok(xs.iter().zip(ws).map(|(x, w)| x * w).sum::<f64>() / wsum)
}

/// Quantile by linear interpolation between order statistics: with the values
/// sorted, quantile q sits at position h = (n-1)q and interpolates between the
/// two neighbouring order statistics (Hyndman & Fan type 7).
///
/// `q` must lie in [0, 1]; the input need not be sorted.
pub fn quantile(xs: &[f64], q: f64) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::data("quantile of empty slice".to_string()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::config(format!("quantile level {q} outside [0, 1]")));
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite value in quantile input"));
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        return Ok(sorted[lo]);
    }
    let frac = h - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Ranks with average resolution of ties, 1-based (value 1 for the smallest).
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("non-finite value in rank input"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // Positions i..=j hold tied values; assign the average rank.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of two equal-length slices.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::config(format!(
            "correlation: length mismatch {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::data("correlation requires at least 2 pairs".to_string()));
    }
    let mx = mean(xs)?;
    let my = mean(ys)?;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::data("correlation undefined for constant data".to_string()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Two-sided p-value for a Pearson correlation on `n` pairs, via the exact
/// t transform t = r sqrt((n-2)/(1-r^2)).
pub fn pearson_p_two_sided(r: f64, n: usize) -> Result<f64> {
    if n < 3 {
        return Err(Error::data("correlation test requires at least 3 pairs".to_string()));
    }
    if r.abs() >= 1.0 {
        return Ok(0.0);
    }
    let df = (n - 2) as f64;
    let t = r * (df / (1.0 - r * r)).sqrt();
    t_p_two_sided(t, df)
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// One-sample Kolmogorov-Smirnov test against the uniform distribution on
/// [0, 1]. Returns `(statistic, p_value)` using Stephens' small-sample
/// adjustment of the asymptotic Kolmogorov distribution.
pub fn ks_test_uniform(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return Err(Error::data("KS test on empty sample".to_string()));
    }
    if xs.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::config("KS uniformity test: values outside [0, 1]".to_string()));
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite value in KS input"));
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, u) in sorted.iter().enumerate() {
        let upper = (i + 1) as f64 / n - u;
        let lower = u - i as f64 / n;
        d = d.max(upper).max(lower);
    }
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    Ok((d, kolmogorov_survival(lambda)))
}

/// Survival function of the Kolmogorov distribution,
/// Q(lambda) = 2 sum_{j>=1} (-1)^(j-1) exp(-2 j^2 lambda^2).
fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 1e-8 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=100 {
        let term = (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-12 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Significance stars: `***` below 0.01, `**` below 0.05, `*` below 0.1.
pub fn stars(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.1 {
        "*"
    } else {
        ""
    }
}

/// FNV-1a 64-bit hash, used to fingerprint configurations in run manifests.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
