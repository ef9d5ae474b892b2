//! Acceptance suite: one test per criterion, each printing a single
//! `[PASS]` / `[FAIL]` line before asserting.
//!
//! Run with `cargo test -p qagg-core --test acceptance -- --nocapture` to see
//! the lines.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use qagg::aggregator::{AggregatorConfig, Locality, Resolution, Trainable};
use qagg::basemodels::{self, BaseModelKind, FitOptions};
use qagg::conformal::{nested_conformalize, split_cqr, summarize};
use qagg::distlab::{moment, probability_average, quantile_average, tail_ratio_profile, Gaussian};
use qagg::harness::{generate, run_experiment, BaseFamily, ExperimentConfig, Method, Report, SyntheticKind};
use qagg::isotonic::{self, IsoOperator};
use qagg::neuralnet::{Mlp, MlpSpec, NodeId, ParamSet, Tape};
use qagg::scoring::{self, QuantileGrid};
use qagg::{seed, Mat};

fn report(id: u32, name: &str, ok: bool, elapsed: Duration, limit: Duration, detail: &str) {
    let within = elapsed <= limit;
    let verdict = if ok && within { "PASS" } else { "FAIL" };
    println!(
        "[{verdict}] criterion {id:>2} {name}: {detail} ({:.1}s, limit {}s)",
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    assert!(ok, "criterion {id} ({name}) failed: {detail}");
    assert!(within, "criterion {id} ({name}) exceeded its time limit");
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

// ---------------------------------------------------------------- 1

fn gaussian_crps(y: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).unwrap();
    y * (2.0 * n.cdf(y) - 1.0) + 2.0 * n.pdf(y) - 1.0 / std::f64::consts::PI.sqrt()
}

#[test]
fn criterion_01_scoring_identities() {
    let start = Instant::now();
    let mut rng = seed::rng(101);
    let mut worst_identity: f64 = 0.0;
    for _ in 0..10_000 {
        // symmetric grid without the median, from random exclusion probabilities
        let k = rng.random_range(1..6);
        let mut alphas: Vec<f64> = (0..k).map(|_| rng.random_range(0.02..0.98)).collect();
        alphas.sort_by(f64::total_cmp);
        alphas.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
        let grid = QuantileGrid::from_alphas(&alphas).unwrap();
        let mut q: Vec<f64> = (0..grid.len()).map(|_| rng.random_range(-5.0..5.0)).collect();
        q.sort_by(f64::total_cmp);
        let y = rng.random_range(-7.0..7.0);
        let two_pinball = 2.0 * scoring::pinball_sum(&grid, y, &q).unwrap();
        let interval_form = scoring::wis_interval(&grid, &q, y).unwrap();
        let wis = scoring::wis(&grid, &q, y).unwrap();
        worst_identity = worst_identity
            .max((interval_form - two_pinball).abs())
            .max((wis - two_pinball).abs());
    }

    let grid = QuantileGrid::even(999);
    let std = Gaussian::new(0.0, 1.0).unwrap();
    let q: Vec<f64> = grid.levels().iter().map(|&t| std.quantile(t)).collect();
    // (2/m)·pinball_sum weights an (m+1)-spaced grid by 1/m, a bias that grows
    // roughly like 7.5e-4·|y|; the tolerance is checked on |y| ≤ 1 and the
    // wider range is only reported
    let crps_error = |y: f64| (scoring::crps_discrete(&grid, &q, y).unwrap() - gaussian_crps(y)).abs();
    let worst_crps = (0..=20).map(|i| crps_error(-1.0 + 0.1 * i as f64)).fold(0.0, f64::max);
    let wide_crps = (0..=40).map(|i| crps_error(-4.0 + 0.2 * i as f64)).fold(0.0, f64::max);
    report(
        1,
        "scoring identities",
        worst_identity <= 1e-12 && worst_crps <= 1e-3,
        start.elapsed(),
        secs(10),
        &format!(
            "max |WIS - 2 pinball| = {worst_identity:.2e}, max CRPS error {worst_crps:.2e} on |y| <= 1 ({wide_crps:.2e} on |y| <= 4)"
        ),
    );
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_02_post_isotonization_never_hurts_pinball() {
    let start = Instant::now();
    let mut rng = seed::rng(202);
    let mut violations = 0;
    for _ in 0..10_000 {
        let m = rng.random_range(2..12);
        let grid = QuantileGrid::even(m);
        let v: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y = rng.random_range(-4.0..4.0);
        let before = scoring::pinball_sum(&grid, y, &v).unwrap();
        for op in [IsoOperator::Sort, IsoOperator::Pava] {
            let out = isotonic::apply(op, &v, grid.anchor_index()).unwrap().values;
            let after = scoring::pinball_sum(&grid, y, &out).unwrap();
            if after > before + 1e-12 {
                violations += 1;
            }
        }
    }
    // min-max sweep from the median can raise the loss:
    // (0, 1, 0.5) becomes (0, 1, 1), and y = 0.6 is now on the wrong side of the 0.75 level
    let grid = QuantileGrid::new(vec![0.25, 0.5, 0.75]).unwrap();
    let v = [0.0, 1.0, 0.5];
    let y = 0.6;
    let swept = isotonic::apply(IsoOperator::MinMaxSweep, &v, grid.anchor_index())
        .unwrap()
        .values;
    let before = scoring::pinball_sum(&grid, y, &v).unwrap();
    let after = scoring::pinball_sum(&grid, y, &swept).unwrap();
    report(
        2,
        "post sort / PAVA never increase pinball",
        violations == 0 && after > before,
        start.elapsed(),
        secs(10),
        &format!("{violations} violations; min-max counterexample {before:.4} -> {after:.4}"),
    );
}

// ---------------------------------------------------------------- 3

/// Closest nondecreasing vector by enumerating every split into consecutive
/// blocks and replacing each block by its mean.
fn brute_force_projection(v: &[f64]) -> Vec<f64> {
    let m = v.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for cuts in 0u32..(1 << (m - 1)) {
        let mut out = Vec::with_capacity(m);
        let mut start = 0;
        for end in 1..=m {
            if end == m || cuts & (1 << (end - 1)) != 0 {
                let mean = v[start..end].iter().sum::<f64>() / (end - start) as f64;
                out.extend(std::iter::repeat_n(mean, end - start));
                start = end;
            }
        }
        if out.windows(2).any(|w| w[0] > w[1]) {
            continue;
        }
        let dist: f64 = out.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum();
        if best.as_ref().is_none_or(|b| dist < b.0) {
            best = Some((dist, out));
        }
    }
    best.unwrap().1
}

#[test]
fn criterion_03_pava_matches_brute_force_projection() {
    let start = Instant::now();
    let mut rng = seed::rng(303);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let m = rng.random_range(1..=4);
        let v: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let pava = isotonic::apply(IsoOperator::Pava, &v, 0).unwrap().values;
        let oracle = brute_force_projection(&v);
        for (a, b) in pava.iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
    }
    report(
        3,
        "PAVA equals brute-force projection",
        worst <= 1e-8,
        start.elapsed(),
        secs(30),
        &format!("max deviation {worst:.2e}"),
    );
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_quantile_versus_probability_averaging() {
    let start = Instant::now();
    let mut rng = seed::rng(404);
    let (mut worst_mean, mut worst_sharp, mut worst_shape) = (0.0f64, f64::NEG_INFINITY, 0.0f64);
    for _ in 0..100 {
        let dists = [
            Gaussian::new(rng.random_range(-3.0..3.0), rng.random_range(0.2..3.0)).unwrap(),
            Gaussian::new(rng.random_range(-3.0..3.0), rng.random_range(0.2..3.0)).unwrap(),
        ];
        let w1 = rng.random_range(0.0..1.0);
        let w = [w1, 1.0 - w1];
        let pa = probability_average(&dists, &w).unwrap();
        let qa = quantile_average(&dists, &w).unwrap();
        worst_mean = worst_mean.max((moment(&pa, 1).unwrap() - moment(&qa, 1).unwrap()).abs());
        worst_sharp = worst_sharp.max(moment(&qa, 2).unwrap() - moment(&pa, 2).unwrap());

        // the quantile average of location-scale members stays in the family
        let predicted = Normal::new(
            w[0] * dists[0].mean + w[1] * dists[1].mean,
            w[0] * dists[0].sd + w[1] * dists[1].sd,
        )
        .unwrap();
        for (&u, &q) in qa.u.iter().zip(&qa.quantiles) {
            if (0.001..=0.999).contains(&u) {
                worst_shape = worst_shape.max((q - predicted.inverse_cdf(u)).abs());
            }
        }
    }
    report(
        4,
        "moments and shape of averages",
        worst_mean < 1e-3 && worst_sharp <= 1e-6 && worst_shape < 1e-8,
        start.elapsed(),
        secs(60),
        &format!(
            "max |mean diff| {worst_mean:.2e}, max m2 excess {worst_sharp:.2e}, sup-norm {worst_shape:.2e}"
        ),
    );
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_quantile_average_has_thinner_tails() {
    let start = Instant::now();
    let dists = [Gaussian::new(0.0, 1.0).unwrap(), Gaussian::new(0.0, 0.25).unwrap()];
    let v: Vec<f64> = (0..=80).map(|i| 4.0 + 0.05 * i as f64).collect();
    let profile = tail_ratio_profile(&dists, &[0.5, 0.5], &v).unwrap();
    let below = profile.rows.iter().all(|r| r.quant_ratio < r.prob_ratio);
    let decreasing = profile.rows.windows(2).all(|w| w[1].quant_ratio < w[0].quant_ratio);
    report(
        5,
        "tail thinning on [4, 8]",
        below && decreasing && profile.omitted.is_empty() && profile.rows.len() == v.len(),
        start.elapsed(),
        secs(10),
        &format!(
            "{} points, pointwise below: {below}, decreasing: {decreasing}",
            profile.rows.len()
        ),
    );
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_dqa_loss_gradients_match_finite_differences() {
    let start = Instant::now();
    let (p, m, r, d, hidden) = (3, 5, 6, 3, 6);
    let levels: Vec<f64> = QuantileGrid::even(m).levels().to_vec();
    let anchor = QuantileGrid::even(m).anchor_index();
    let mut usable = 0;
    let mut worst: f64 = 0.0;
    for s in 0..100u64 {
        let mut rng = seed::rng(seed::derive(606, s));
        let mut params = ParamSet::default();
        let spec = MlpSpec::new(d, &[hidden], Resolution::Fine.weight_count(p, m), 0.0).unwrap();
        let mlp = Mlp::init(spec, &mut params, &mut rng).unwrap();
        let x = Mat::from_vec(r, d, (0..r * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let vals = Mat::from_vec(r, p * m, (0..r * p * m).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let y: Vec<f64> = (0..r).map(|_| rng.random_range(-3.0..3.0)).collect();
        let margins: Vec<f64> = (0..m * m).map(|_| rng.random_range(0.0..0.3)).collect();
        let build = |t: &mut Tape, ps: &ParamSet| -> NodeId {
            let xn = t.constant(x.clone());
            let logits = mlp.forward(t, ps, xn, None);
            let w = t.softmax_groups(logits, Resolution::Fine.group_size(p, m));
            let v = t.constant(vals.clone());
            let q = t.mix(w, v, Resolution::Fine, p, m);
            let penalty = t.crossing_mean(q, &margins);
            let penalty = t.scale(penalty, 2.0);
            let iso = t.isotonize(q, IsoOperator::MinMaxSweep, anchor).unwrap();
            let fit = t.pinball_mean(iso, &y, &levels);
            t.add(fit, penalty)
        };
        let mut tape = Tape::new();
        let loss = build(&mut tape, &params);
        if tape.kink_margin() < 1e-4 {
            continue;
        }
        usable += 1;
        let analytic: Vec<f64> = tape
            .backward(loss, &params)
            .unwrap()
            .iter()
            .flat_map(|g| g.data.clone())
            .collect();
        let base = params.flatten();
        let h = 1e-6;
        let mut numeric = Vec::with_capacity(base.len());
        let mut probe = params.clone();
        for k in 0..base.len() {
            let mut at = |delta: f64| {
                let mut xk = base.clone();
                xk[k] += delta;
                probe.assign_flat(&xk);
                let mut t = Tape::new();
                let id = build(&mut t, &probe);
                t.scalar(id)
            };
            numeric.push((at(h) - at(-h)) / (2.0 * h));
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / norm.max(1e-8));
    }
    report(
        6,
        "DQA loss gradients",
        usable >= 50 && worst <= 1e-5,
        start.elapsed(),
        secs(60),
        &format!("{usable}/100 non-degenerate points, worst relative error {worst:.2e}"),
    );
}

// ---------------------------------------------------------------- 7 and 10

fn recovery_config() -> ExperimentConfig {
    ExperimentConfig {
        seeds: (0..5).collect(),
        levels: 9,
        alphas: vec![0.2],
        base_models: vec![
            BaseFamily::single(BaseModelKind::linear()),
            BaseFamily::single(BaseModelKind::gaussian_linear()),
            BaseFamily::single(BaseModelKind::knn(50)),
        ],
        methods: vec![
            Method::Weighted {
                resolution: Resolution::Coarse,
                locality: Locality::Global,
            },
            Method::DQA,
        ],
        crossing_weights: vec![1.0],
        margin_scales: vec![1e-2],
        ..Default::default()
    }
}

fn recovery_run() -> (Report, Duration) {
    let data = generate(SyntheticKind::TwoRegime, 5000, 4, 2024).unwrap();
    let start = Instant::now();
    let report = run_experiment(&recovery_config(), &data).unwrap();
    (report, start.elapsed())
}

fn first_recovery_run() -> &'static (Report, Duration) {
    static RUN: OnceLock<(Report, Duration)> = OnceLock::new();
    RUN.get_or_init(recovery_run)
}

#[test]
fn criterion_07_local_fine_beats_bases_and_coarse_global() {
    let (outcome, elapsed) = first_recovery_run();
    let wis = |method: &str| outcome.aggregate("two_regime", method).unwrap().test_wis;
    let dqa = wis("fine_local");
    let coarse = wis("coarse_global");
    let bases: Vec<(String, f64)> = outcome
        .aggregates()
        .filter(|r| r.method.starts_with("base_"))
        .map(|r| (r.method.clone(), r.test_wis))
        .collect();
    let best_base = bases.iter().map(|b| b.1).fold(f64::INFINITY, f64::min);
    let gain = 1.0 - dqa / coarse;
    report(
        7,
        "aggregation recovery",
        bases.len() == 3 && dqa < best_base && gain >= 0.05,
        *elapsed,
        secs(600),
        &format!(
            "mean test WIS: local-fine {dqa:.4}, coarse-global {coarse:.4} ({:.1}% lower), best base {best_base:.4}",
            100.0 * gain
        ),
    );
}

#[test]
fn criterion_10_recovery_reruns_are_bit_identical() {
    let (first, _) = first_recovery_run();
    let (second, elapsed) = recovery_run();
    let identical = *first == second;
    let csv_identical = {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        first.write_csv(&a).unwrap();
        second.write_csv(&b).unwrap();
        std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap()
    };
    report(
        10,
        "determinism",
        identical && csv_identical,
        elapsed,
        secs(600),
        &format!("reports identical: {identical}, CSV bytes identical: {csv_identical}"),
    );
}

// ---------------------------------------------------------------- 8 and 9

fn split_cqr_mean_coverage(alpha: f64, seeds: u64, n_cal: usize) -> f64 {
    let grid = QuantileGrid::even(19);
    let kind = BaseModelKind::knn(25);
    let mut total = 0.0;
    for s in 0..seeds {
        let data = generate(SyntheticKind::Heteroskedastic, 500 + n_cal + 1000, 2, 800 + s).unwrap();
        let train: Vec<usize> = (0..500).collect();
        let cal: Vec<usize> = (500..500 + n_cal).collect();
        let test: Vec<usize> = (500 + n_cal..data.len()).collect();
        let pick = |idx: &[usize]| idx.iter().map(|&i| data.y[i]).collect::<Vec<_>>();
        let model = basemodels::fit(&kind, &data.x.select_rows(&train), &pick(&train), &grid, &FitOptions::default()).unwrap();
        let cqr = split_cqr(&grid, &[alpha], &model.predict(&data.x.select_rows(&cal)).unwrap(), &pick(&cal), &cal, &train).unwrap();
        let iv = cqr.intervals(&model.predict(&data.x.select_rows(&test)).unwrap()).unwrap();
        total += summarize(&[alpha], &iv, &pick(&test)).unwrap()[0].coverage;
    }
    total / seeds as f64
}

struct NestedRun {
    coverages: Vec<f64>,
    fit_counts: Vec<Vec<usize>>,
    n: usize,
}

fn nested_dqa_runs(alpha: f64, seeds: u64) -> NestedRun {
    let grid = QuantileGrid::even(9);
    let n = 500;
    let kinds = [BaseModelKind::linear(), BaseModelKind::gaussian_linear(), BaseModelKind::knn(25)];
    let cfg = AggregatorConfig {
        hidden: vec![32, 32],
        max_epochs: 100,
        ..Default::default()
    };
    let mut coverages = Vec::new();
    let mut fit_counts = Vec::new();
    for s in 0..seeds {
        let train = generate(SyntheticKind::Heteroskedastic, n, 2, 900 + s).unwrap();
        let test = generate(SyntheticKind::Heteroskedastic, 1000, 2, 90_000 + s).unwrap();
        let out = nested_conformalize(
            &kinds,
            Trainable::Weighted(Resolution::Fine, Locality::Local),
            &cfg,
            &grid,
            &[alpha],
            &train.x,
            &train.y,
            5,
            s,
            &FitOptions::default(),
        )
        .unwrap();
        let iv = out.model.intervals(&test.x).unwrap();
        coverages.push(summarize(&[alpha], &iv, &test.y).unwrap()[0].coverage);
        fit_counts.push(out.base_fits);
    }
    NestedRun { coverages, fit_counts, n }
}

fn nested_runs() -> &'static (NestedRun, Duration) {
    static RUN: OnceLock<(NestedRun, Duration)> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        (nested_dqa_runs(0.2, 20), start.elapsed())
    })
}

#[test]
fn criterion_08_conformal_coverage() {
    let start = Instant::now();
    let n_cal = 200;
    let upper_slack = 1.0 / (n_cal as f64 + 1.0);
    let mut ok = true;
    let mut parts = Vec::new();
    for alpha in [0.1, 0.2] {
        let cov = split_cqr_mean_coverage(alpha, 200, n_cal);
        ok &= cov >= 1.0 - alpha - 0.01 && cov <= 1.0 - alpha + upper_slack + 0.01;
        parts.push(format!("split alpha={alpha}: {cov:.4}"));
    }
    let (nested, _) = nested_runs();
    let alpha = 0.2;
    let floor = 1.0 - 2.0 * alpha - (2.0 / nested.n as f64).sqrt();
    let min = nested.coverages.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = nested.coverages.iter().sum::<f64>() / nested.coverages.len() as f64;
    ok &= min >= floor && mean >= 1.0 - alpha - 0.02;
    parts.push(format!(
        "nested CV+ over local-fine at alpha=0.2: min {min:.4} (floor {floor:.4}), mean {mean:.4} over {} seeds",
        nested.coverages.len()
    ));
    report(8, "conformal coverage", ok, start.elapsed(), secs(1200), &parts.join("; "));
}

#[test]
fn criterion_09_nested_fit_accounting() {
    let (nested, elapsed) = nested_runs();
    let ok = nested.fit_counts.iter().all(|c| c.iter().all(|&k| k == 10));
    report(
        9,
        "nested fit accounting",
        ok,
        *elapsed,
        secs(1200),
        &format!("base fits per model per run at K=5: {:?}", nested.fit_counts[0]),
    );
}
