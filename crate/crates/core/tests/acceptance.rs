//! Acceptance gate: eleven end-to-end criteria that the toolkit must meet,
//! each verified against an independent oracle (explicit dummy-variable
//! regression, grid search, finite differences, exhaustive search, planted
//! ground truth, or Monte Carlo calibration). Every test prints one
//! `ACCEPTANCE NN PASS`/`FAIL` line (visible with `--nocapture`); tolerances
//! are pinned in the assertions.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use panelcausal_core::causal::{
    did_estimate, entropy_balance, event_study, heckman_two_stage, placebo_permutation,
    psm_match, DidSpec, EventWindow, SelectionSpec, INTERACTION,
};
use panelcausal_core::panel::{PanelBuilder, PanelDataset};
use panelcausal_core::pipeline::{
    emit_report, run_pipeline, standard_controls, EmitFormats, PipelineConfig,
};
use panelcausal_core::regress::{binary_mle, marginal_effects, ols_cluster, FixedEffectSpec, Link};
use panelcausal_core::report::to_canonical_json;
use panelcausal_core::stats;
use panelcausal_core::sur::{
    breusch_pagan_from_residuals, joint_zero_wald, signed_equality_wald, sur_fit, SurEquation,
    SurSystem, VcovMode,
};
use panelcausal_core::synth::{equicorrelation, generate_panel, DgpConfig, Preset};
use panelcausal_core::washing::{
    assign_treatment, decoupling_residuals, persistence_stats, AssignmentMode, DecouplingSpec,
    StrictStatus,
};

macro_rules! check {
    ($n:expr, $cond:expr, $($msg:tt)+) => {
        if !$cond {
            panic!("ACCEPTANCE {:02} FAIL: {}", $n, format!($($msg)+));
        }
    };
}

fn pass(n: usize, msg: &str) {
    println!("ACCEPTANCE {n:02} PASS: {msg}");
}

/// Baseline design against the generator's planted treatment label.
fn planted_spec(fe: FixedEffectSpec) -> DidSpec {
    let mut spec = DidSpec::new("DebtFC", "Treat", 2021);
    spec.controls = standard_controls();
    spec.fe = fe;
    spec
}

/// One-year panel with one row per firm, for matching and balancing
/// instances.
fn unit_panel(treat: &[f64], covars: &[(&str, &[f64])]) -> PanelDataset {
    let n = treat.len();
    let mut builder = PanelBuilder {
        firms: (0..n).map(|i| format!("F{i:05}")).collect(),
        years: vec![2020; n],
        industries: vec!["IND01".to_string(); n],
        provinces: vec!["P01".to_string(); n],
        columns: vec![("Treat".to_string(), treat.iter().map(|&v| Some(v)).collect())],
    };
    for (name, values) in covars {
        builder
            .columns
            .push((name.to_string(), values.iter().map(|&v| Some(v)).collect()));
    }
    builder.build().unwrap()
}

/// `Treat x Post` on the generator's planted label.
fn add_treat_post(panel: &mut PanelDataset, policy_year: i32) {
    let treat: Vec<Option<f64>> = panel.column("Treat").unwrap().to_vec();
    let years = panel.years().to_vec();
    let tp: Vec<Option<f64>> = treat
        .iter()
        .zip(&years)
        .map(|(t, &y)| t.map(|t| if y >= policy_year { t } else { 0.0 }))
        .collect();
    panel.set_column("treat_post", tp).unwrap();
}

// ---------------------------------------------------------------------------
// 1. Absorbed OLS vs explicit dummy-variable least squares
// ---------------------------------------------------------------------------

/// Slopes from the explicit dummy-variable oracle: project y and the named
/// regressors off the full indicator matrix of every fixed-effect level,
/// then run plain least squares on the residualized columns. The projection
/// uses the pseudo-inverse of the indicator Gram matrix built from its
/// symmetric eigendecomposition, zeroing the redundancy modes by an
/// eigenvalue cutoff.
fn dummy_oracle_slopes(
    panel: &PanelDataset,
    rows: &[usize],
    y: &[f64],
    x: &[(String, Vec<f64>)],
    four_way: bool,
) -> Vec<f64> {
    let n = rows.len();
    let years = panel.years();
    let mut year_levels: Vec<i32> = rows.iter().map(|&i| years[i]).collect();
    year_levels.sort_unstable();
    year_levels.dedup();
    let year_idx =
        |i: usize| year_levels.binary_search(&years[i]).expect("year observed") as usize;

    let firm = panel.firm_codes();
    let industry = panel.industry_codes();
    let province = panel.province_codes();
    let t_count = year_levels.len();

    let mut dims: Vec<Vec<usize>> = Vec::new();
    dims.push(rows.iter().map(|&i| firm[i]).collect());
    dims.push(rows.iter().map(|&i| year_idx(i)).collect());
    if four_way {
        dims.push(rows.iter().map(|&i| industry[i] * t_count + year_idx(i)).collect());
        dims.push(rows.iter().map(|&i| province[i] * t_count + year_idx(i)).collect());
    }

    // One indicator column per observed level of every dimension.
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for codes in &dims {
        let mut levels: Vec<usize> = codes.clone();
        levels.sort_unstable();
        levels.dedup();
        for &level in &levels {
            columns.push(codes.iter().map(|&c| if c == level { 1.0 } else { 0.0 }).collect());
        }
    }
    let d = DMatrix::from_fn(n, columns.len(), |r, c| columns[c][r]);

    // Right-hand block: [y | x1 ... xk].
    let k = x.len();
    let mut b = DMatrix::zeros(n, k + 1);
    for r in 0..n {
        b[(r, 0)] = y[r];
        for (j, (_, col)) in x.iter().enumerate() {
            b[(r, j + 1)] = col[r];
        }
    }
    let gram = d.transpose() * &d;
    let rhs = d.transpose() * &b;
    let eig = nalgebra::SymmetricEigen::new(gram);
    let max_ev = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let cut = max_ev * 1e-9;
    let mut scaled = eig.eigenvectors.transpose() * rhs;
    for (i, &ev) in eig.eigenvalues.iter().enumerate() {
        let inv = if ev > cut { 1.0 / ev } else { 0.0 };
        for c in 0..scaled.ncols() {
            scaled[(i, c)] *= inv;
        }
    }
    let coef = &eig.eigenvectors * scaled;
    let resid = &b - &d * &coef;

    let xt = resid.columns(1, k).into_owned();
    let yt = resid.column(0).into_owned();
    let xtx = xt.transpose() * &xt;
    let xty = xt.transpose() * &yt;
    let slopes = xtx.cholesky().expect("residualized design has full rank").solve(&xty);
    (0..k).map(|j| slopes[(j, 0)]).collect()
}

#[test]
fn criterion_01_absorbed_slopes_match_the_dummy_variable_oracle() {
    const N: usize = 1;
    let started = Instant::now();
    let mut checked = 0usize;

    for panel_i in 0..50u64 {
        let mut cfg = DgpConfig::preset(Preset::DidParallel);
        cfg.n_firms = 60 + ((panel_i as usize) * 13) % 141;
        cfg.start_year = 2018;
        cfg.end_year = 2023;
        cfg.seed = 0xACCE_0001;
        cfg.replication = panel_i;
        let (panel, _) = generate_panel(&cfg).unwrap();

        for four_way in [false, true] {
            let fe =
                if four_way { FixedEffectSpec::four_way() } else { FixedEffectSpec::firm_year() };
            let spec = planted_spec(fe);
            let fit = did_estimate(&panel, &spec, None).unwrap();

            // Rebuild the design on the exact estimation sample.
            let rows = fit.used_rows.clone();
            let y = panel.dense_at(&spec.outcome, &rows).unwrap();
            let years = panel.years();
            let treat = panel.dense_at(&spec.treat, &rows).unwrap();
            let tp: Vec<f64> = rows
                .iter()
                .zip(&treat)
                .map(|(&i, &t)| if years[i] >= spec.policy_year { t } else { 0.0 })
                .collect();
            let mut x: Vec<(String, Vec<f64>)> = vec![(INTERACTION.to_string(), tp)];
            for name in &spec.controls {
                x.push((name.clone(), panel.dense_at(name, &rows).unwrap()));
            }

            let oracle = dummy_oracle_slopes(&panel, &rows, &y, &x, four_way);
            for (j, (name, _)) in x.iter().enumerate() {
                let absorbed = fit.coefficient(name).unwrap().estimate;
                check!(
                    N,
                    (absorbed - oracle[j]).abs() <= 1e-6,
                    "panel {panel_i} four_way={four_way}: `{name}` absorbed {absorbed} vs dummy oracle {} (gap {:.2e})",
                    oracle[j],
                    (absorbed - oracle[j]).abs()
                );
                checked += 1;
            }
        }
    }
    let elapsed = started.elapsed();
    check!(N, elapsed.as_secs_f64() < 60.0, "runtime {elapsed:?} exceeds 1 minute");
    pass(
        N,
        &format!(
            "{checked} absorbed slopes match the explicit dummy-variable oracle to 1e-6 across \
             50 panels, two-way and four-way ({elapsed:.1?})"
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. Planted-effect recovery and CI coverage
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_planted_effect_recovery_and_ci_coverage() {
    const N: usize = 2;
    const BETA: f64 = 0.125;
    let started = Instant::now();
    let reps = 200u64;

    let results: Vec<(f64, f64, f64)> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut cfg = DgpConfig::preset(Preset::DidParallel);
            cfg.n_firms = 1000;
            cfg.start_year = 2015;
            cfg.end_year = 2024;
            cfg.seed = 0xBEEF_0002;
            cfg.replication = r;
            let (panel, _) = generate_panel(&cfg).unwrap();
            let fit = did_estimate(&panel, &planted_spec(FixedEffectSpec::four_way()), None)
                .unwrap();
            let est = fit.coefficient(INTERACTION).unwrap().estimate;
            let (lo, hi) = fit.ci95(INTERACTION).unwrap();
            (est, lo, hi)
        })
        .collect();

    let mean = results.iter().map(|r| r.0).sum::<f64>() / reps as f64;
    let covered = results.iter().filter(|&&(_, lo, hi)| lo <= BETA && BETA <= hi).count();
    let coverage = covered as f64 / reps as f64;
    let elapsed = started.elapsed();

    check!(
        N,
        (mean - BETA).abs() <= 0.01,
        "mean estimate {mean:.5} misses planted {BETA} by more than 0.01"
    );
    check!(
        N,
        (0.93..=0.97).contains(&coverage),
        "95% CI coverage {coverage:.3} outside [0.93, 0.97]"
    );
    check!(N, elapsed.as_secs_f64() < 300.0, "runtime {elapsed:?} exceeds 5 minutes");
    pass(
        N,
        &format!(
            "200 panels of 1000 firms: mean estimate {mean:.4} (planted {BETA}), CI coverage \
             {coverage:.3} ({elapsed:.1?})"
        ),
    );
}

// ---------------------------------------------------------------------------
// 3. Event-study pre-period nulls and post-period step recovery
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_event_study_pretrend_nulls_and_step_recovery() {
    const N: usize = 3;
    let reps = 200u64;

    let mut cfg0 = DgpConfig::preset(Preset::DidParallel);
    cfg0.n_firms = 500;
    cfg0.start_year = 2015;
    cfg0.end_year = 2024;
    cfg0.seed = 0xACCE_0003;
    let (_, truth) = generate_panel(&cfg0).unwrap();
    let planted_at = |tau: i32| -> f64 {
        truth.event_path.iter().find(|e| e.tau == tau).map(|e| e.effect).unwrap()
    };

    let per_rep: Vec<Vec<(i32, f64, f64)>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut cfg = cfg0.clone();
            cfg.replication = r;
            let (panel, _) = generate_panel(&cfg).unwrap();
            let result = event_study(
                &panel,
                &planted_spec(FixedEffectSpec::four_way()),
                EventWindow::standard(),
            )
            .unwrap();
            result.estimates.iter().map(|e| (e.tau, e.estimate, e.p)).collect()
        })
        .collect();

    // Pre-period cells (tau = -4..-2): insignificant at 5% in >= 90%.
    let mut pre_cells = 0usize;
    let mut pre_null = 0usize;
    for rep in &per_rep {
        for &(tau, _, p) in rep {
            if tau < -1 {
                pre_cells += 1;
                pre_null += usize::from(p > 0.05);
            }
        }
    }
    let null_share = pre_null as f64 / pre_cells as f64;
    check!(
        N,
        null_share >= 0.90,
        "pre-period coefficients insignificant in only {null_share:.3} of {pre_cells} cells"
    );

    // Post-period cells: the mean estimate recovers the planted step.
    for tau in 0..=3 {
        let ests: Vec<f64> = per_rep
            .iter()
            .flat_map(|rep| rep.iter().filter(|e| e.0 == tau).map(|e| e.1))
            .collect();
        assert_eq!(ests.len(), reps as usize);
        let mean = ests.iter().sum::<f64>() / ests.len() as f64;
        let planted = planted_at(tau);
        check!(
            N,
            (mean - planted).abs() <= 0.02,
            "event time {tau}: mean estimate {mean:.4} misses planted step {planted} by more \
             than 0.02"
        );
    }
    pass(
        N,
        &format!(
            "pre-period nulls hold in {null_share:.3} of cells; post-period means recover the \
             planted step within 0.02 over {reps} panels"
        ),
    );
}

// ---------------------------------------------------------------------------
// 4. Placebo permutation calibration
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_placebo_rank_uniformity_and_power() {
    const N: usize = 4;

    // Null generator: no planted effect, so the actual estimate is
    // exchangeable with the permutation draws and its p-value is uniform.
    let p_values: Vec<f64> = (0..100u64)
        .map(|r| {
            let mut cfg = DgpConfig::preset(Preset::DidParallel);
            cfg.n_firms = 150;
            cfg.start_year = 2018;
            cfg.end_year = 2023;
            cfg.beta_treat = 0.0;
            cfg.seed = 0xACCE_0004;
            cfg.replication = r;
            let (panel, _) = generate_panel(&cfg).unwrap();
            placebo_permutation(
                &panel,
                &planted_spec(FixedEffectSpec::four_way()),
                1000,
                0xACCE_0004 ^ (r + 1),
            )
            .unwrap()
            .p_value
        })
        .collect();
    let (ks_stat, ks_p) = stats::ks_test_uniform(&p_values).unwrap();
    check!(
        N,
        ks_p > 0.01,
        "placebo p-values depart from uniform: KS statistic {ks_stat:.4}, p {ks_p:.4}"
    );

    // Power: with the planted effect, no permutation draw is as extreme.
    let mut cfg = DgpConfig::preset(Preset::DidParallel);
    cfg.n_firms = 1000;
    cfg.start_year = 2015;
    cfg.end_year = 2024;
    cfg.seed = 0xACCE_0014;
    let (panel, _) = generate_panel(&cfg).unwrap();
    let result = placebo_permutation(
        &panel,
        &planted_spec(FixedEffectSpec::four_way()),
        1000,
        0xACCE_0015,
    )
    .unwrap();
    check!(
        N,
        result.p_value <= 0.001,
        "empirical placebo p {:.4} above 0.001 under the planted effect",
        result.p_value
    );
    pass(
        N,
        &format!(
            "placebo p-values uniform under the null (KS p {ks_p:.3}); planted effect yields \
             empirical p {:.4} over 1000 draws",
            result.p_value
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. Entropy-balancing exactness
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_entropy_balancing_moment_exactness() {
    const N: usize = 5;

    // Hand instance: controls at {0, 2} against a treated mean of 1 must
    // split the control mass exactly in half — normalized weights
    // (0.5, 0.5), which the documented sum-to-treated-count scaling
    // reports as (1.0, 1.0) here.
    let panel = unit_panel(&[1.0, 1.0, 0.0, 0.0], &[("X", &[1.0, 1.0, 0.0, 2.0])]);
    let wv = entropy_balance(&panel, "Treat", &["X"], 1e-10).unwrap();
    let control_sum = wv.weights[2] + wv.weights[3];
    let shares = (wv.weights[2] / control_sum, wv.weights[3] / control_sum);
    check!(
        N,
        (shares.0 - 0.5).abs() < 1e-12 && (shares.1 - 0.5).abs() < 1e-12,
        "hand instance control shares ({}, {}) differ from (0.5, 0.5)",
        shares.0,
        shares.1
    );
    check!(
        N,
        (wv.weights[2] - 1.0).abs() < 1e-12 && (wv.weights[3] - 1.0).abs() < 1e-12,
        "hand instance scaled weights ({}, {}) differ from (1.0, 1.0)",
        wv.weights[2],
        wv.weights[3]
    );

    // Random instances across the feasible envelope.
    let mut rng = ChaCha12Rng::seed_from_u64(0xACCE_0005);
    let mut solved = 0usize;
    let mut max_gap: f64 = 0.0;
    for inst in 0..20usize {
        let dim = 1 + inst % 10;
        let n_treated = 15;
        let n_control = 50 + 25 * (inst % 6);
        let n = n_treated + n_control;
        let treat: Vec<f64> =
            (0..n).map(|i| if i < n_treated { 1.0 } else { 0.0 }).collect();
        let covars: Vec<(String, Vec<f64>)> = (0..dim)
            .map(|j| {
                let col: Vec<f64> = (0..n)
                    .map(|i| {
                        let shift = if i < n_treated { 0.25 } else { 0.0 };
                        shift + rng.sample::<f64, _>(StandardNormal)
                    })
                    .collect();
                (format!("X{j}"), col)
            })
            .collect();
        let refs: Vec<(&str, &[f64])> =
            covars.iter().map(|(n, c)| (n.as_str(), c.as_slice())).collect();
        let panel = unit_panel(&treat, &refs);
        let names: Vec<&str> = covars.iter().map(|(n, _)| n.as_str()).collect();
        let Ok(wv) = entropy_balance(&panel, "Treat", &names, 1e-9) else {
            continue; // infeasible draw: treated means outside the hull
        };
        solved += 1;
        for (name, col) in &covars {
            let treated_mean =
                col.iter().take(n_treated).sum::<f64>() / n_treated as f64;
            let (mut wsum, mut wx) = (0.0, 0.0);
            for i in n_treated..n {
                wsum += wv.weights[i];
                wx += wv.weights[i] * col[i];
            }
            let gap = (wx / wsum - treated_mean).abs();
            max_gap = max_gap.max(gap);
            check!(
                N,
                gap < 1e-8,
                "instance {inst} covariate {name}: moment gap {gap:.2e} at tolerance 1e-8"
            );
        }
    }
    check!(N, solved >= 18, "only {solved}/20 instances were feasible");
    pass(
        N,
        &format!(
            "hand instance weights exact; {solved}/20 random instances balanced with worst \
             moment gap {max_gap:.2e}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Matching: bias reduction and the exhaustive-search oracle
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_matching_bias_reduction_and_exhaustive_oracle() {
    const N: usize = 6;

    // Bias battery: five factor-correlated covariates, treated shifted on
    // the common factor.
    let loadings = [0.65, 0.70, 0.75, 0.60, 0.70];
    let mut within = 0usize;
    let mut cells = 0usize;
    let mut before_sum = 0.0;
    for rep in 0..50u64 {
        let mut rng = ChaCha12Rng::seed_from_u64(0xACCE_0006 + rep);
        let n_treated = 1200;
        let n_control = 3600;
        let n = n_treated + n_control;
        let treat: Vec<f64> =
            (0..n).map(|i| if i < n_treated { 1.0 } else { 0.0 }).collect();
        let factor: Vec<f64> = (0..n)
            .map(|i| {
                let shift = if i < n_treated { 1.0 } else { 0.0 };
                shift + rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let covars: Vec<(String, Vec<f64>)> = loadings
            .iter()
            .enumerate()
            .map(|(j, &load)| {
                let idio = (1.0f64 - load * load).max(0.05).sqrt();
                let col: Vec<f64> = (0..n)
                    .map(|i| load * factor[i] + idio * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                (format!("X{j}"), col)
            })
            .collect();
        let refs: Vec<(&str, &[f64])> =
            covars.iter().map(|(n, c)| (n.as_str(), c.as_slice())).collect();
        let panel = unit_panel(&treat, &refs);
        let names: Vec<&str> = covars.iter().map(|(n, _)| n.as_str()).collect();
        let wv = psm_match(&panel, "Treat", &names, 1, 0.05, 0).unwrap();
        for row in &wv.diagnostics {
            before_sum += row.before.abs();
            cells += 1;
            within += usize::from(row.after.abs() <= 5.0);
        }
    }
    let within_share = within as f64 / cells as f64;
    let mean_before = before_sum / cells as f64;
    check!(
        N,
        mean_before > 20.0,
        "design produced too little imbalance (mean pre-match bias {mean_before:.1}%)"
    );
    check!(
        N,
        within_share >= 0.90,
        "post-match bias within 5% for only {within_share:.3} of {cells} covariate cells"
    );

    // Exhaustive oracle on a small instance: recompute the scores with the
    // same estimator, then brute-force the k nearest in-caliper controls
    // per treated unit under the documented tie-break.
    let mut rng = ChaCha12Rng::seed_from_u64(0xACCE_0016);
    let n_treated = 15;
    let n = n_treated + 60;
    let treat: Vec<f64> = (0..n).map(|i| if i < n_treated { 1.0 } else { 0.0 }).collect();
    let covars: Vec<(String, Vec<f64>)> = (0..3)
        .map(|j| {
            let col: Vec<f64> = (0..n)
                .map(|i| {
                    let shift = if i < n_treated { 0.3 } else { 0.0 };
                    shift + rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            (format!("X{j}"), col)
        })
        .collect();
    let refs: Vec<(&str, &[f64])> =
        covars.iter().map(|(n, c)| (n.as_str(), c.as_slice())).collect();
    let panel = unit_panel(&treat, &refs);
    let names: Vec<&str> = covars.iter().map(|(n, _)| n.as_str()).collect();
    let (k, caliper) = (3usize, 0.08f64);
    let wv = psm_match(&panel, "Treat", &names, k, caliper, 0).unwrap();

    let x: Vec<(String, Vec<f64>)> = covars.clone();
    let cluster: Vec<usize> = (0..n).collect();
    let fit = binary_mle(&treat, &x, Link::Logit, &cluster).unwrap();
    let matrix: Vec<Vec<f64>> = covars.iter().map(|(_, c)| c.clone()).collect();
    let scores = fit.predict_prob(&matrix).unwrap();

    let mut oracle = vec![0.0f64; n];
    let mut oracle_unmatched = 0usize;
    for tj in 0..n_treated {
        let mut candidates: Vec<(f64, usize, usize)> = (n_treated..n)
            .map(|cj| ((scores[cj] - scores[tj]).abs(), cj, cj))
            .filter(|&(d, _, _)| d <= caliper)
            .collect();
        if candidates.len() < k {
            oracle_unmatched += 1;
            continue;
        }
        candidates
            .sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        oracle[tj] = 1.0;
        for &(_, _, cj) in candidates.iter().take(k) {
            oracle[cj] += 1.0 / k as f64;
        }
    }
    check!(
        N,
        wv.unmatched_treated == oracle_unmatched,
        "unmatched counts differ: {} vs oracle {oracle_unmatched}",
        wv.unmatched_treated
    );
    for i in 0..n {
        check!(
            N,
            wv.weights[i] == oracle[i],
            "weight at unit {i} is {} but the exhaustive oracle gives {}",
            wv.weights[i],
            oracle[i]
        );
    }
    pass(
        N,
        &format!(
            "post-match bias within 5% in {within_share:.3} of cells (mean pre-match \
             {mean_before:.0}%); 1:{k} matches equal the exhaustive-search oracle exactly"
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. Selection correction vs naive least squares
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_selection_correction_beats_naive_ols() {
    const N: usize = 7;
    const BETA: f64 = 0.125;
    let selection = SelectionSpec {
        selected: "selected".to_string(),
        instrument: "IT_ratio".to_string(),
        controls: vec!["no_entry".to_string()],
    };

    // Correlated selection: the corrected estimate must be closer to the
    // planted effect than the uncorrected one, replication by replication.
    // The panel is sized so the correction's sampling noise sits well below
    // the naive estimator's selection bias (about 0.07 here).
    let wins: usize = (0..200u64)
        .into_par_iter()
        .map(|r| {
            let mut cfg = DgpConfig::preset(Preset::Selection);
            cfg.n_firms = 2500;
            cfg.start_year = 2015;
            cfg.end_year = 2024;
            cfg.seed = 0xACCE_0007;
            cfg.replication = r;
            let (panel, _) = generate_panel(&cfg).unwrap();
            let spec = planted_spec(FixedEffectSpec::four_way());
            let naive = did_estimate(&panel, &spec, None)
                .unwrap()
                .coefficient(INTERACTION)
                .unwrap()
                .estimate;
            let corrected = heckman_two_stage(&panel, &selection, &spec)
                .unwrap()
                .second_stage
                .coefficient(INTERACTION)
                .unwrap()
                .estimate;
            usize::from((corrected - BETA).abs() < (naive - BETA).abs())
        })
        .sum();
    check!(
        N,
        wins >= 190,
        "correction beat the naive estimate in only {wins}/200 replications"
    );

    // No selection: the correction term must read as noise.
    let insignificant: usize = (0..100u64)
        .into_par_iter()
        .map(|r| {
            let mut cfg = DgpConfig::preset(Preset::Selection);
            cfg.n_firms = 2500;
            cfg.start_year = 2015;
            cfg.end_year = 2024;
            cfg.selection_rho = 0.0;
            cfg.seed = 0xACCE_0017;
            cfg.replication = r;
            let (panel, _) = generate_panel(&cfg).unwrap();
            let spec = planted_spec(FixedEffectSpec::four_way());
            let h = heckman_two_stage(&panel, &selection, &spec).unwrap();
            usize::from(h.imr_p > 0.05)
        })
        .sum();
    check!(
        N,
        insignificant >= 90,
        "correction term significant too often without selection: insignificant in only \
         {insignificant}/100"
    );
    pass(
        N,
        &format!(
            "correction beats naive least squares in {wins}/200 correlated-selection panels; \
             correction term insignificant in {insignificant}/100 panels without selection"
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. Binary MLE vs grid search, AMEs vs finite differences, ratio constant
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_probit_grid_search_finite_differences_and_ratio_constant() {
    const N: usize = 8;

    fn probit_loglik(y: &[f64], x: &[f64], b0: f64, b1: f64) -> f64 {
        y.iter()
            .zip(x)
            .map(|(&yi, &xi)| {
                let p = stats::normal_cdf(b0 + b1 * xi).clamp(1e-300, 1.0 - 1e-16);
                if yi == 1.0 { p.ln() } else { (1.0 - p).ln() }
            })
            .sum()
    }

    // Grid-search oracle on one-covariate instances: successively refined
    // grids centered at each stage's argmax, never at the MLE itself.
    for inst in 0..3u64 {
        let mut rng = ChaCha12Rng::seed_from_u64(0xACCE_0008 + inst);
        let n = 300;
        let x: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&xi| {
                let e: f64 = rng.sample(StandardNormal);
                if 0.4 + 0.8 * xi + e > 0.0 { 1.0 } else { 0.0 }
            })
            .collect();
        let cluster: Vec<usize> = (0..n).collect();
        let fit =
            binary_mle(&y, &[("x".to_string(), x.clone())], Link::Probit, &cluster).unwrap();
        let mle = (fit.coefficients[0].estimate, fit.coefficients[1].estimate);

        let mut center = (0.0f64, 0.0f64);
        for (range, step) in [(2.0f64, 0.05f64), (0.06, 1e-3), (2e-3, 5e-5)] {
            let steps = (2.0 * range / step).round() as i64;
            let mut best = (f64::NEG_INFINITY, center);
            for i in 0..=steps {
                let b0 = center.0 - range + step * i as f64;
                for j in 0..=steps {
                    let b1 = center.1 - range + step * j as f64;
                    let ll = probit_loglik(&y, &x, b0, b1);
                    if ll > best.0 {
                        best = (ll, (b0, b1));
                    }
                }
            }
            center = best.1;
        }
        check!(
            N,
            (mle.0 - center.0).abs() <= 1e-4 && (mle.1 - center.1).abs() <= 1e-4,
            "instance {inst}: MLE ({:.6}, {:.6}) vs grid argmax ({:.6}, {:.6})",
            mle.0,
            mle.1,
            center.0,
            center.1
        );
    }

    // Average marginal effects vs central finite differences of the mean
    // predicted probability.
    let mut rng = ChaCha12Rng::seed_from_u64(0xACCE_0018);
    let n = 400;
    let x1: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let x2: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let e: f64 = rng.sample(StandardNormal);
            if -0.2 + 0.7 * x1[i] - 0.5 * x2[i] + e > 0.0 { 1.0 } else { 0.0 }
        })
        .collect();
    let cluster: Vec<usize> = (0..n).collect();
    let x = vec![("x1".to_string(), x1.clone()), ("x2".to_string(), x2.clone())];
    for link in [Link::Probit, Link::Logit] {
        let fit = binary_mle(&y, &x, link, &cluster).unwrap();
        let ames = marginal_effects(&fit, &x).unwrap();
        let h = 1e-5;
        for (j, cols) in [&x1, &x2].iter().enumerate() {
            let mut shifted: Vec<Vec<f64>> = vec![x1.clone(), x2.clone()];
            shifted[j] = cols.iter().map(|v| v + h).collect();
            let up: f64 =
                fit.predict_prob(&shifted).unwrap().iter().sum::<f64>() / n as f64;
            shifted[j] = cols.iter().map(|v| v - h).collect();
            let down: f64 =
                fit.predict_prob(&shifted).unwrap().iter().sum::<f64>() / n as f64;
            let fd = (up - down) / (2.0 * h);
            check!(
                N,
                (ames[j].effect - fd).abs() <= 1e-6,
                "{link:?} AME for x{}: analytic {:.8} vs finite difference {fd:.8}",
                j + 1,
                ames[j].effect
            );
        }
    }

    // The correction-ratio constant at zero index.
    let (ratio, clamped) = stats::inverse_mills(0.0);
    check!(
        N,
        !clamped && (ratio - 0.79788).abs() < 5e-6,
        "ratio at zero is {ratio:.7}, not 0.79788 to 5 decimals"
    );
    pass(
        N,
        &format!(
            "MLE matches the grid oracle to 1e-4, AMEs match finite differences to 1e-6, and \
             the zero-index ratio is {ratio:.5}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 9. Joint system: OLS equality, planted recovery, and test calibration
// ---------------------------------------------------------------------------

fn sur_panel(
    corr: Vec<Vec<f64>>,
    coefs: [f64; 4],
    n_firms: usize,
    seed: u64,
    replication: u64,
) -> PanelDataset {
    let mut cfg = DgpConfig::preset(Preset::SurSystem);
    cfg.n_firms = n_firms;
    cfg.start_year = 2015;
    cfg.end_year = 2024;
    cfg.sur_error_corr = corr;
    cfg.sur_coefs = coefs;
    cfg.seed = seed;
    cfg.replication = replication;
    let (mut panel, _) = generate_panel(&cfg).unwrap();
    add_treat_post(&mut panel, cfg.policy_year);
    panel
}

fn sur_system(vcov: VcovMode) -> SurSystem {
    let mut system = SurSystem::new(
        ["DebtFC", "DebtFlow", "AIWord", "AIPatent"]
            .iter()
            .map(|o| SurEquation::new(o, &["treat_post"]))
            .collect(),
    );
    system.standardize_outcomes = false;
    system.vcov = vcov;
    system
}

#[test]
fn criterion_09_joint_system_estimation_and_test_calibration() {
    const N: usize = 9;
    const PLANTED: [f64; 4] = [0.018, -0.049, -0.044, 0.051];

    // (a) Identical regressor sets: the GLS step must reproduce
    // equation-wise OLS exactly (here with a diagonal planted covariance).
    let panel = sur_panel(equicorrelation(4, 0.0), PLANTED, 400, 0xACCE_0009, 0);
    let fit = sur_fit(&panel, &sur_system(VcovMode::Gls)).unwrap();
    let rows = panel
        .complete_rows(&["DebtFC", "DebtFlow", "AIWord", "AIPatent", "treat_post"])
        .unwrap();
    let effects = FixedEffectSpec::firm_year().resolve(&panel, &rows).unwrap();
    let firm = panel.firm_codes();
    let cluster: Vec<usize> = rows.iter().map(|&i| firm[i]).collect();
    let tp = panel.dense_at("treat_post", &rows).unwrap();
    for (l, outcome) in ["DebtFC", "DebtFlow", "AIWord", "AIPatent"].iter().enumerate() {
        let y = panel.dense_at(outcome, &rows).unwrap();
        let ols = ols_cluster(
            &y,
            &[("treat_post".to_string(), tp.clone())],
            &effects,
            &cluster,
            None,
        )
        .unwrap();
        let gap = (fit.equations[l].coefficients[0].estimate
            - ols.coefficient("treat_post").unwrap().estimate)
            .abs();
        check!(N, gap <= 1e-8, "equation `{outcome}`: system vs OLS gap {gap:.2e}");
    }

    // (b) Planted coefficient recovery under correlated errors.
    let reps = 100u64;
    let sums: [f64; 4] = (0..reps)
        .into_par_iter()
        .map(|r| {
            let panel =
                sur_panel(equicorrelation(4, 0.4), PLANTED, 500, 0xACCE_0019, r);
            let fit = sur_fit(&panel, &sur_system(VcovMode::Gls)).unwrap();
            let mut est = [0.0; 4];
            for l in 0..4 {
                est[l] = fit.equations[l].coefficients[0].estimate;
            }
            est
        })
        .reduce(
            || [0.0; 4],
            |mut a, b| {
                for l in 0..4 {
                    a[l] += b[l];
                }
                a
            },
        );
    for l in 0..4 {
        let mean = sums[l] / reps as f64;
        check!(
            N,
            (mean - PLANTED[l]).abs() <= 0.01,
            "equation {l}: mean estimate {mean:.4} misses planted {} by more than 0.01",
            PLANTED[l]
        );
    }

    // (c) Independence test: power at correlation 0.3 and size under
    // independence, on simulated residual draws.
    let bp_rate = |rho: f64, reps: u64, seed: u64| -> f64 {
        let m = 4;
        let n = 5000;
        let corr = DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { rho });
        let l = corr.cholesky().unwrap().l();
        let mut rejections = 0usize;
        for rep in 0..reps {
            let mut rng = ChaCha12Rng::seed_from_u64(seed + rep);
            let mut resid: Vec<Vec<f64>> = vec![Vec::with_capacity(n); m];
            for _ in 0..n {
                let z = DMatrix::from_fn(m, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
                let e = &l * z;
                for eq in 0..m {
                    resid[eq].push(e[(eq, 0)]);
                }
            }
            let test = breusch_pagan_from_residuals(&resid).unwrap();
            rejections += usize::from(test.p < 0.05);
        }
        rejections as f64 / reps as f64
    };
    let power = bp_rate(0.3, 200, 0xACCE_0029);
    check!(N, power >= 0.99, "independence test rejects correlation 0.3 in only {power:.3}");
    let size = bp_rate(0.0, 400, 0xACCE_0039);
    check!(
        N,
        (0.02..=0.09).contains(&size),
        "independence test size {size:.3} far from the 5% nominal level"
    );

    // (d) Wald calibration: joint-zero and signed-equality tests under
    // their nulls.
    let wald_rates: (usize, usize) = (0..150u64)
        .into_par_iter()
        .map(|r| {
            let null_panel =
                sur_panel(equicorrelation(4, 0.4), [0.0; 4], 250, 0xACCE_0049, r);
            let fit = sur_fit(&null_panel, &sur_system(VcovMode::Gls)).unwrap();
            let joint = joint_zero_wald(&fit, "treat_post").unwrap();

            let equal_panel =
                sur_panel(equicorrelation(4, 0.4), [0.05; 4], 250, 0xACCE_0059, r);
            let fit = sur_fit(&equal_panel, &sur_system(VcovMode::Gls)).unwrap();
            let equality =
                signed_equality_wald(&fit, "treat_post", &[1.0, 1.0, 1.0, 1.0]).unwrap();
            (usize::from(joint.p < 0.05), usize::from(equality.p < 0.05))
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let joint_size = wald_rates.0 as f64 / 150.0;
    let equality_size = wald_rates.1 as f64 / 150.0;
    check!(
        N,
        (0.005..=0.105).contains(&joint_size),
        "joint-zero test size {joint_size:.3} far from nominal"
    );
    check!(
        N,
        (0.005..=0.105).contains(&equality_size),
        "signed-equality test size {equality_size:.3} far from nominal"
    );
    pass(
        N,
        &format!(
            "system equals OLS to 1e-8; planted quadruple recovered within 0.01; independence \
             test power {power:.2} and size {size:.3}; Wald sizes {joint_size:.3}/{equality_size:.3}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 10. Disclosure-residual measurement
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_residual_recovery_assignment_invariants_and_persistence() {
    const N: usize = 10;

    // (a) The estimated residual recovers the planted one. The decoupling
    // regressions are per-year cross-sections, so their coefficient noise
    // shrinks with the firm count; the panel is sized to make the
    // irreducible estimation leakage small against the planted signal.
    let mut cfg = DgpConfig::preset(Preset::DidParallel);
    cfg.n_firms = 3000;
    cfg.start_year = 2015;
    cfg.end_year = 2024;
    cfg.seed = 0xACCE_000A;
    let (panel, truth) = generate_panel(&cfg).unwrap();
    let window: Vec<i32> = vec![2018, 2019, 2020];
    let residuals = decoupling_residuals(&panel, &DecouplingSpec::new(window.clone())).unwrap();
    let mut est = Vec::new();
    let mut planted = Vec::new();
    for (i, r) in residuals.iter().enumerate() {
        if let Some(r) = r {
            est.push(*r);
            planted.push(truth.planted_residuals[i]);
        }
    }
    let corr = stats::pearson(&est, &planted).unwrap();
    check!(N, corr > 0.99, "residual recovery correlation {corr:.4} at threshold 0.99");

    // (b) Assignment invariants on hand-built firms. Names are chosen so
    // the panel's (firm, year) sort preserves this order.
    let firms = ["a_allpos", "b_mixed", "c_allneg", "d_gap", "e_empty"];
    let residual_by_firm: [[Option<f64>; 2]; 5] = [
        [Some(1.0), Some(2.0)],
        [Some(-1.0), Some(3.0)],
        [Some(-0.5), Some(-0.25)],
        [Some(2.0), None],
        [None, None],
    ];
    let mut builder = PanelBuilder {
        firms: firms.iter().flat_map(|f| [f.to_string(), f.to_string()]).collect(),
        years: firms.iter().flat_map(|_| [2019, 2020]).collect(),
        industries: vec!["IND01".to_string(); 10],
        provinces: vec!["P01".to_string(); 10],
        columns: Vec::new(),
    };
    builder.columns.push(("Dummy".to_string(), vec![Some(1.0); 10]));
    let hand = builder.build().unwrap();
    let residuals: Vec<Option<f64>> =
        residual_by_firm.iter().flat_map(|pair| pair.iter().copied()).collect();
    let table = assign_treatment(&hand, &residuals, &[2019, 2020]).unwrap();
    let by_name = |name: &str| table.firms.iter().find(|f| f.firm == name).unwrap();

    let expectations: [(&str, bool, StrictStatus, Option<bool>); 4] = [
        ("a_allpos", true, StrictStatus::Treated, Some(true)),
        ("b_mixed", true, StrictStatus::Excluded, Some(true)),
        ("c_allneg", false, StrictStatus::Control, Some(false)),
        ("d_gap", true, StrictStatus::Excluded, None),
    ];
    for (name, mean, strict, single) in expectations {
        let firm = by_name(name);
        check!(
            N,
            firm.treat_mean == mean && firm.treat_strict == strict
                && firm.treat_single_year == single,
            "firm {name}: labels (mean {}, strict {:?}, single {:?}) differ from ({mean}, \
             {strict:?}, {single:?})",
            firm.treat_mean,
            firm.treat_strict,
            firm.treat_single_year
        );
    }
    check!(
        N,
        table.excluded_firms == vec!["e_empty".to_string()],
        "firms without window residuals: {:?}",
        table.excluded_firms
    );
    let strict_col = table.treatment_column(&hand, AssignmentMode::Strict).unwrap();
    check!(
        N,
        strict_col[0] == Some(1.0) && strict_col[2].is_none() && strict_col[4] == Some(0.0)
            && strict_col[6].is_none() && strict_col[8].is_none(),
        "strict treatment column misassigns rows: {strict_col:?}"
    );

    // (c) Transition rows are probability distributions.
    let mut cfg = DgpConfig::preset(Preset::Persistence);
    cfg.n_firms = 600;
    cfg.start_year = 2015;
    cfg.end_year = 2024;
    cfg.seed = 0xACCE_001A;
    let (panel, _) = generate_panel(&cfg).unwrap();
    let long_window: Vec<i32> = (2015..=2020).collect();
    let residuals =
        decoupling_residuals(&panel, &DecouplingSpec::new(long_window.clone())).unwrap();
    let stats_07 = persistence_stats(&panel, &residuals).unwrap();
    for (i, row) in stats_07.transition.iter().enumerate() {
        let total: usize = stats_07.counts[i].iter().sum();
        if total > 0 {
            let sum: f64 = row.iter().sum();
            check!(N, (sum - 1.0).abs() < 1e-12, "transition row {i} sums to {sum}");
        }
    }

    // (d) Rank persistence rises with the planted autocorrelation.
    let spearman_at = |ar: f64| -> f64 {
        let mut cfg = DgpConfig::preset(Preset::Persistence);
        cfg.n_firms = 800;
        cfg.start_year = 2015;
        cfg.end_year = 2024;
        cfg.residual_ar = ar;
        cfg.seed = 0xACCE_002A;
        let (panel, _) = generate_panel(&cfg).unwrap();
        let residuals =
            decoupling_residuals(&panel, &DecouplingSpec::new(long_window.clone())).unwrap();
        persistence_stats(&panel, &residuals).unwrap().spearman
    };
    let (s0, s4, s8) = (spearman_at(0.0), spearman_at(0.4), spearman_at(0.8));
    check!(
        N,
        s0 < s4 && s4 < s8 && s4 - s0 > 0.1 && s8 - s4 > 0.1,
        "rank persistence not monotone in the planted autocorrelation: {s0:.3}, {s4:.3}, {s8:.3}"
    );
    pass(
        N,
        &format!(
            "residual recovery correlation {corr:.3}; assignment invariants hold; transition \
             rows sum to 1; rank persistence {s0:.2} < {s4:.2} < {s8:.2}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 11. End-to-end determinism across worker counts
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_reports_are_byte_identical_across_worker_counts() {
    const N: usize = 11;
    let toml = r#"
        [input]
        synthetic = "selection"
        n_firms = 200

        [robustness]
        psm = true
        eb = true
        heckman = true
        placebo = 40
        event_study = true
        intensity = true
        quantile = true
        z_difference = true
        strict = true
        exclude_years = [2020]
        policy_controls = ["Mshare"]

        [moderation]
        moderators = ["Mshare"]

        [heterogeneity]
        splits = ["Size"]
        n_perm = 15

        [sur]
        enabled = true
    "#;
    let base = PipelineConfig::from_toml_str(toml).unwrap();

    let mut one = base.clone();
    one.threads = 1;
    let mut eight = base.clone();
    eight.threads = 8;

    let bundle_one = run_pipeline(&one).unwrap();
    let bundle_eight = run_pipeline(&eight).unwrap();
    let json_one = to_canonical_json(&bundle_one).unwrap();
    let json_eight = to_canonical_json(&bundle_eight).unwrap();
    check!(
        N,
        json_one == json_eight,
        "canonical reports differ between 1 and 8 workers ({} vs {} bytes)",
        json_one.len(),
        json_eight.len()
    );

    // The emitted files agree byte for byte as well.
    let dir = std::env::temp_dir().join(format!("panelcausal_acc11_{}", std::process::id()));
    let dir_one = dir.join("one");
    let dir_eight = dir.join("eight");
    emit_report(&bundle_one, &dir_one, EmitFormats::default()).unwrap();
    emit_report(&bundle_eight, &dir_eight, EmitFormats::default()).unwrap();
    let bytes_one = std::fs::read(dir_one.join("report.json")).unwrap();
    let bytes_eight = std::fs::read(dir_eight.join("report.json")).unwrap();
    check!(N, bytes_one == bytes_eight, "emitted report files differ across worker counts");
    check!(N, !bytes_one.is_empty(), "emitted report is empty");
    std::fs::remove_dir_all(&dir).ok();
    pass(
        N,
        &format!(
            "full-battery reports are byte-identical at 1 and 8 workers ({} bytes)",
            bytes_one.len()
        ),
    );
}
