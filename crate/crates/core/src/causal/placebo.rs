//! Placebo inference by firm-label permutation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::panel::PanelDataset;
use crate::regress::{drop_singletons, Absorber, RegressionResult};

use super::did::{did_estimate, DidSpec, Frame, INTERACTION};

/// Placebo distribution and the empirical p-value of the actual estimate.
#[derive(Debug, Clone, Serialize)]
pub struct PlaceboResult {
    /// The actual-design fit.
    #[serde(skip)]
    pub actual: RegressionResult,
    /// Actual interaction estimate (duplicated out of `actual` for export).
    pub actual_estimate: f64,
    /// Interaction estimates under permuted treatment labels.
    pub placebo_estimates: Vec<f64>,
    /// Share of placebo draws at least as extreme as the actual estimate.
    pub p_value: f64,
    /// Draws skipped because the permuted design was degenerate.
    pub skipped_draws: usize,
}

/// Re-estimate the design under random firm-label permutations.
///
/// Each draw shuffles the firms' treatment labels (treated count
/// preserved), re-estimates the interaction, and stores the coefficient;
/// the empirical p is the share of draws with `|placebo| >= |actual|`.
/// Draws use independent RNG streams keyed by draw index, so results are
/// identical for any worker count.
///
/// Only the treatment column changes across draws, so the outcome and
/// controls are partialled of the fixed effects once; each draw then
/// absorbs its own interaction column and applies the
/// Frisch-Waugh-Lovell identity, which reproduces the full re-estimated
/// coefficient exactly.
pub fn placebo_permutation(
    data: &PanelDataset,
    spec: &DidSpec,
    n_perm: usize,
    seed: u64,
) -> Result<PlaceboResult> {
    if n_perm == 0 {
        return Err(Error::config("placebo needs at least one permutation".to_string()));
    }
    let actual = did_estimate(data, spec, None)?;
    let actual_estimate = actual.coefficient(INTERACTION)?.estimate;

    // Rebuild the estimation sample exactly as the fit used it: resolve the
    // effects, drop singleton groups, and absorb once.
    let frame = Frame::build(data, spec)?;
    let effects = spec.fe.resolve(data, &frame.rows)?;
    let (kept, _) = drop_singletons(&effects);
    let effects = effects.subset(&kept);
    let absorber = Absorber::new(&effects, None)?;

    let pick = |v: &[f64]| -> Vec<f64> { kept.iter().map(|&j| v[j]).collect() };
    let y = pick(&frame.y);
    let post = pick(&frame.post);
    let mut work: Vec<Vec<f64>> = Vec::with_capacity(1 + frame.controls.len());
    work.push(y);
    for (_, col) in &frame.controls {
        work.push(pick(col));
    }
    absorber.partial_out(&mut work)?;
    let y_w = work.remove(0);
    let controls_w = work;

    // Gram factor of the absorbed controls for the per-draw partialling.
    let control_chol = if controls_w.is_empty() {
        None
    } else {
        use nalgebra::DMatrix;
        let k = controls_w.len();
        let gram = DMatrix::from_fn(k, k, |a, b| dot(&controls_w[a], &controls_w[b]));
        Some(gram.cholesky().ok_or_else(|| {
            Error::estimation("controls are collinear after absorption".to_string())
        })?)
    };

    // Firm-level labels over the estimation sample.
    let firms_all = data.firm_codes();
    let sample_firm: Vec<usize> = kept.iter().map(|&j| firms_all[frame.rows[j]]).collect();
    let mut firm_ids: Vec<usize> = sample_firm.clone();
    firm_ids.sort_unstable();
    firm_ids.dedup();
    let firm_pos: std::collections::HashMap<usize, usize> =
        firm_ids.iter().enumerate().map(|(p, &f)| (f, p)).collect();
    let mut base_labels = vec![0.0; firm_ids.len()];
    for (row, &j) in kept.iter().enumerate() {
        base_labels[firm_pos[&sample_firm[row]]] = frame.treat[j];
    }

    let betas: Vec<Option<f64>> = (0..n_perm)
        .into_par_iter()
        .map(|draw| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(draw as u64 + 1);
            let mut labels = base_labels.clone();
            labels.shuffle(&mut rng);

            let mut tp: Vec<Vec<f64>> = vec![sample_firm
                .iter()
                .zip(&post)
                .map(|(f, &p)| labels[firm_pos[f]] * p)
                .collect()];
            if absorber.partial_out(&mut tp).is_err() {
                return None;
            }
            let mut tp = tp.pop().unwrap();

            if let Some(chol) = &control_chol {
                use nalgebra::DVector;
                let k = controls_w.len();
                let xty = DVector::from_fn(k, |a, _| dot(&controls_w[a], &tp));
                let coef = chol.solve(&xty);
                for (a, col) in controls_w.iter().enumerate() {
                    let c = coef[a];
                    for (t, &v) in tp.iter_mut().zip(col) {
                        *t -= c * v;
                    }
                }
            }
            let denom = dot(&tp, &tp);
            if denom <= 1e-12 * tp.len() as f64 {
                return None;
            }
            Some(dot(&tp, &y_w) / denom)
        })
        .collect();

    let placebo_estimates: Vec<f64> = betas.iter().flatten().copied().collect();
    let skipped = n_perm - placebo_estimates.len();
    if placebo_estimates.is_empty() {
        return Err(Error::estimation("every placebo draw was degenerate".to_string()));
    }
    let extreme = placebo_estimates
        .iter()
        .filter(|&&b| b.abs() >= actual_estimate.abs())
        .count();
    let p_value = extreme as f64 / placebo_estimates.len() as f64;

    Ok(PlaceboResult {
        actual,
        actual_estimate,
        placebo_estimates,
        p_value,
        skipped_draws: skipped,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_panel, DgpConfig, Preset};
    use approx::assert_abs_diff_eq;

    fn spec() -> DidSpec {
        let mut spec = DidSpec::new("DebtFC", "Treat", 2021);
        spec.controls = vec!["Size".to_string(), "Lev".to_string(), "ROA".to_string()];
        spec
    }

    #[test]
    fn identical_seeds_reproduce_and_different_seeds_diverge() {
        let cfg = DgpConfig { n_firms: 60, seed: 10, ..DgpConfig::preset(Preset::DidParallel) };
        let (panel, _) = generate_panel(&cfg).unwrap();
        let a = placebo_permutation(&panel, &spec(), 20, 7).unwrap();
        let b = placebo_permutation(&panel, &spec(), 20, 7).unwrap();
        assert_eq!(a.placebo_estimates, b.placebo_estimates);
        assert_eq!(a.p_value, b.p_value);
        let c = placebo_permutation(&panel, &spec(), 20, 8).unwrap();
        assert_ne!(a.placebo_estimates, c.placebo_estimates);
    }

    #[test]
    fn a_strong_planted_effect_beats_every_permutation() {
        let cfg = DgpConfig { n_firms: 400, seed: 11, ..DgpConfig::preset(Preset::DidParallel) };
        let (panel, _) = generate_panel(&cfg).unwrap();
        let res = placebo_permutation(&panel, &spec(), 99, 3).unwrap();
        assert!(res.p_value <= 0.02, "p {}", res.p_value);
        assert!((res.actual_estimate - 0.125).abs() < 0.05);
        assert_eq!(res.skipped_draws, 0);
    }

    #[test]
    fn zero_permutations_is_a_config_error() {
        let cfg = DgpConfig { n_firms: 30, seed: 12, ..DgpConfig::preset(Preset::DidParallel) };
        let (panel, _) = generate_panel(&cfg).unwrap();
        let err = placebo_permutation(&panel, &spec(), 0, 1).unwrap_err();
        assert!(err.to_string().contains("permutation"), "{err}");
    }

    #[test]
    fn shortcut_reestimation_equals_a_full_refit_of_the_permuted_design() {
        // Reproduce draw 0's shuffled labels, write them into a copy of the
        // panel as the treatment column, and fit that design from scratch;
        // the partialled-out shortcut must give the same coefficient.
        let cfg = DgpConfig { n_firms: 80, seed: 13, ..DgpConfig::preset(Preset::DidParallel) };
        let (panel, _) = generate_panel(&cfg).unwrap();
        let spec = spec();
        let seed = 55;
        let res = placebo_permutation(&panel, &spec, 3, seed).unwrap();
        assert_eq!(res.skipped_draws, 0);

        let frame = Frame::build(&panel, &spec).unwrap();
        let effects = spec.fe.resolve(&panel, &frame.rows).unwrap();
        let (kept, _) = drop_singletons(&effects);
        let firms_all = panel.firm_codes();
        let sample_firm: Vec<usize> = kept.iter().map(|&j| firms_all[frame.rows[j]]).collect();
        let mut firm_ids = sample_firm.clone();
        firm_ids.sort_unstable();
        firm_ids.dedup();
        let firm_pos: std::collections::HashMap<usize, usize> =
            firm_ids.iter().enumerate().map(|(p, &f)| (f, p)).collect();
        let mut labels = vec![0.0; firm_ids.len()];
        for (row, &j) in kept.iter().enumerate() {
            labels[firm_pos[&sample_firm[row]]] = frame.treat[j];
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(1);
        labels.shuffle(&mut rng);

        let original = panel.column(spec.treat.as_str()).unwrap().to_vec();
        let permuted: Vec<Option<f64>> = (0..panel.n_rows())
            .map(|i| match firm_pos.get(&firms_all[i]) {
                Some(&p) => Some(labels[p]),
                None => original[i],
            })
            .collect();
        let mut refit_panel = panel.clone();
        refit_panel.set_column(spec.treat.as_str(), permuted).unwrap();
        let full = did_estimate(&refit_panel, &spec, None).unwrap();
        assert_abs_diff_eq!(
            full.coefficient(INTERACTION).unwrap().estimate,
            res.placebo_estimates[0],
            epsilon = 1e-8
        );
    }

    #[test]
    fn worker_count_does_not_change_the_draw_sequence() {
        let cfg = DgpConfig { n_firms: 50, seed: 14, ..DgpConfig::preset(Preset::DidParallel) };
        let (panel, _) = generate_panel(&cfg).unwrap();
        let spec = spec();
        let parallel = placebo_permutation(&panel, &spec, 16, 9).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let serial = pool.install(|| placebo_permutation(&panel, &spec, 16, 9)).unwrap();
        assert_eq!(parallel.placebo_estimates, serial.placebo_estimates);
    }
}
