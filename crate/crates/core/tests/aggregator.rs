use qagg::aggregator::*;
use qagg::distlab::Gaussian;
use qagg::isotonic::{is_nondecreasing, IsoOperator};
use qagg::scoring::{mean_wis_rows, QuantileGrid};
use qagg::seed;
use qagg::Mat;
use rand::Rng;
use rand_distr::{Distribution, Normal};

struct Synthetic {
    x: Mat,
    y: Vec<f64>,
    /// True conditional quantiles, n×m.
    truth: Mat,
}

/// y = x0 + N(0, 0.5²) with x uniform on [−1, 1]².
fn draw(seed_value: u64, n: usize, grid: &QuantileGrid) -> Synthetic {
    let mut rng = seed::rng(seed_value);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let mut x = Mat::zeros(n, 2);
    let mut y = Vec::with_capacity(n);
    let mut truth = Mat::zeros(n, grid.len());
    for i in 0..n {
        let (a, b) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        x.row_mut(i).copy_from_slice(&[a, b]);
        y.push(a + noise.sample(&mut rng));
        let g = Gaussian::new(a, 0.5).unwrap();
        for (o, &t) in truth.row_mut(i).iter_mut().zip(grid.levels()) {
            *o = g.quantile(t);
        }
    }
    Synthetic { x, y, truth }
}

fn cube(models: &[Mat]) -> BasePredCube {
    BasePredCube::from_models(models, Provenance::External).unwrap()
}

fn perturb(m: &Mat, f: impl Fn(usize, usize) -> f64) -> Mat {
    let mut out = m.clone();
    for i in 0..m.rows {
        for t in 0..m.cols {
            out.data[i * m.cols + t] += f(i, t);
        }
    }
    out
}

fn config() -> AggregatorConfig {
    AggregatorConfig {
        max_epochs: 100,
        ..Default::default()
    }
}

#[test]
fn coarse_global_finds_the_true_model() {
    let grid = QuantileGrid::even(9);
    let tr = draw(1, 2000, &grid);
    let va = draw(2, 500, &grid);
    let mut rng = seed::rng(3);
    let noisy = |s: &Synthetic, rng: &mut seed::Rng| {
        let shifts: Vec<f64> = (0..s.y.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
        perturb(&s.truth, |i, _| shifts[i])
    };
    let c_tr = cube(&[noisy(&tr, &mut rng), tr.truth.clone(), noisy(&tr, &mut rng)]);
    let c_va = cube(&[noisy(&va, &mut rng), va.truth.clone(), noisy(&va, &mut rng)]);
    let agg = fit_global(
        Resolution::Coarse,
        &config(),
        &grid,
        AggData { cube: &c_tr, x: &tr.x, y: &tr.y },
        Some(AggData { cube: &c_va, x: &va.x, y: &va.y }),
    )
    .unwrap();
    let w = agg.weights_at(&va.x).unwrap().unwrap();
    assert!(w[0].weights[1] >= 0.9, "weights {:?}", w[0].weights);
}

#[test]
fn medium_global_splits_levels() {
    let grid = QuantileGrid::even(9);
    let tr = draw(11, 2000, &grid);
    let va = draw(12, 500, &grid);
    let te = draw(13, 2000, &grid);
    // model 0 is right below the median and too high above it; model 1 mirrors that
    let make = |s: &Synthetic| {
        let lo = perturb(&s.truth, |_, t| if t > 4 { 1.0 } else { 0.0 });
        let hi = perturb(&s.truth, |_, t| if t < 4 { -1.0 } else { 0.0 });
        cube(&[lo, hi])
    };
    let (c_tr, c_va, c_te) = (make(&tr), make(&va), make(&te));
    let train = AggData { cube: &c_tr, x: &tr.x, y: &tr.y };
    let val = Some(AggData { cube: &c_va, x: &va.x, y: &va.y });
    let cfg = AggregatorConfig {
        iso: IsoMode::None,
        crossing_weight: 0.0,
        ..config()
    };
    let medium = fit_global(Resolution::Medium, &cfg, &grid, train, val).unwrap();
    let coarse = fit_global(Resolution::Coarse, &cfg, &grid, train, val).unwrap();
    let w = &medium.weights_at(&te.x).unwrap().unwrap()[0].weights;
    for t in 0..9 {
        let (w0, w1) = (w[2 * t], w[2 * t + 1]);
        if t < 4 {
            assert!(w0 > w1, "level {t}: {w0} vs {w1}");
        } else if t > 4 {
            assert!(w1 > w0, "level {t}: {w0} vs {w1}");
        }
    }
    let wis_m = mean_wis_rows(&grid, &medium.predict(&c_te, &te.x).unwrap(), &te.y).unwrap();
    let wis_c = mean_wis_rows(&grid, &coarse.predict(&c_te, &te.x).unwrap(), &te.y).unwrap();
    assert!(wis_m < wis_c, "medium {wis_m} vs coarse {wis_c}");
}

#[test]
fn large_penalty_removes_crossings_on_training_points() {
    let grid = QuantileGrid::even(5);
    let tr = draw(21, 1000, &grid);
    // model 0 has its levels reversed; model 1 is monotone but biased
    let reversed = {
        let mut r = tr.truth.clone();
        for row in r.data.chunks_mut(5) {
            row.reverse();
        }
        r
    };
    let biased = perturb(&tr.truth, |_, _| 0.3);
    let c = cube(&[reversed, biased]);
    let cfg = AggregatorConfig {
        crossing_weight: 50.0,
        margins: MarginScheme::Fixed(0.01),
        iso: IsoMode::None,
        ..config()
    };
    let agg = fit_global(Resolution::Medium, &cfg, &grid, AggData { cube: &c, x: &tr.x, y: &tr.y }, None).unwrap();
    let raw = agg.combine(&c, &tr.x).unwrap();
    let pen = crossing_penalty(&raw, &agg.margins).unwrap();
    assert!(pen <= 1e-9 * tr.y.len() as f64, "penalty {pen}");
}

#[test]
fn local_gating_picks_the_locally_correct_model() {
    let grid = QuantileGrid::even(9);
    let tr = draw(31, 3000, &grid);
    let va = draw(32, 600, &grid);
    let te = draw(33, 2000, &grid);
    let make = |s: &Synthetic| {
        let left = perturb(&s.truth, |i, _| if s.x.get(i, 0) < 0.0 { 0.0 } else { 1.5 });
        let right = perturb(&s.truth, |i, _| if s.x.get(i, 0) < 0.0 { -1.5 } else { 0.0 });
        cube(&[left, right])
    };
    let (c_tr, c_va) = (make(&tr), make(&va));
    let agg = fit_local(
        Resolution::Coarse,
        &config(),
        &grid,
        AggData { cube: &c_tr, x: &tr.x, y: &tr.y },
        Some(AggData { cube: &c_va, x: &va.x, y: &va.y }),
    )
    .unwrap();
    let w = agg.weights_at(&te.x).unwrap().unwrap();
    let (mut hits, mut total) = ([0usize; 2], [0usize; 2]);
    for (i, spec) in w.iter().enumerate() {
        let half = usize::from(te.x.get(i, 0) >= 0.0);
        total[half] += 1;
        if spec.weights[half] > 0.8 {
            hits[half] += 1;
        }
    }
    for h in 0..2 {
        let frac = hits[h] as f64 / total[h] as f64;
        assert!(frac >= 0.9, "half {h}: {frac}");
    }
}

#[test]
fn local_does_not_overfit_without_locality() {
    let grid = QuantileGrid::even(9);
    let tr = draw(41, 5000, &grid);
    let va = draw(42, 1000, &grid);
    let te = draw(43, 3000, &grid);
    // both models are off by a constant; the best mix is the same everywhere
    let make = |s: &Synthetic| cube(&[perturb(&s.truth, |_, _| 0.4), perturb(&s.truth, |_, _| -0.6)]);
    let (c_tr, c_va, c_te) = (make(&tr), make(&va), make(&te));
    let train = AggData { cube: &c_tr, x: &tr.x, y: &tr.y };
    let val = Some(AggData { cube: &c_va, x: &va.x, y: &va.y });
    let local = fit_local(Resolution::Fine, &config(), &grid, train, val).unwrap();
    let global = fit_global(Resolution::Fine, &config(), &grid, train, val).unwrap();
    let wl = mean_wis_rows(&grid, &local.predict(&c_te, &te.x).unwrap(), &te.y).unwrap();
    let wg = mean_wis_rows(&grid, &global.predict(&c_te, &te.x).unwrap(), &te.y).unwrap();
    assert!(wl <= 1.1 * wg, "local {wl} global {wg}");
    for spec in local.weights_at(&te.x).unwrap().unwrap() {
        for g in spec.weights.chunks(2 * 9) {
            assert!((g.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(g.iter().all(|&w| w >= 0.0));
        }
    }
}

#[test]
fn single_model_ensemble_returns_sorted_base() {
    let grid = QuantileGrid::even(5);
    let tr = draw(51, 400, &grid);
    let mut base = tr.truth.clone();
    // introduce a crossing so the post sort is visible
    for row in base.data.chunks_mut(5) {
        row.swap(1, 2);
    }
    let c = cube(&[base.clone()]);
    let agg = fit_global(Resolution::Fine, &config(), &grid, AggData { cube: &c, x: &tr.x, y: &tr.y }, None).unwrap();
    let out = agg.predict(&c, &tr.x).unwrap();
    let spec = &agg.weights_at(&tr.x).unwrap().unwrap()[0];
    // with one model, fine weights still mix levels; compare against the
    // mix applied to the base and then sorted
    for i in 0..tr.y.len() {
        let p = Mat::from_vec(1, 5, base.row(i).to_vec()).unwrap();
        let mut expect = apply_weights(spec, &p).unwrap();
        expect.sort_by(f64::total_cmp);
        for (a, b) in out.row(i).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    let avg = fixed_baseline(Combiner::Average, &grid, 1).unwrap();
    let mut sorted = base.clone();
    for row in sorted.data.chunks_mut(5) {
        row.sort_by(f64::total_cmp);
    }
    assert_eq!(avg.predict(&c, &tr.x).unwrap(), sorted);
}

#[test]
fn average_and_median_baselines() {
    let grid = QuantileGrid::even(3);
    let x = Mat::zeros(1, 1);
    let a = Mat::from_rows(&[vec![0.0, 1.0, 5.0]]).unwrap();
    let b = Mat::from_rows(&[vec![2.0, 3.0, 5.0]]).unwrap();
    let c = cube(&[a.clone(), b]);
    let avg = fixed_baseline(Combiner::Average, &grid, 2).unwrap();
    let med = fixed_baseline(Combiner::Median, &grid, 2).unwrap();
    assert_eq!(avg.predict(&c, &x).unwrap().data, vec![1.0, 2.0, 5.0]);
    assert_eq!(med.predict(&c, &x).unwrap().data, vec![1.0, 2.0, 5.0]);
    let same = cube(&[a.clone(), a.clone(), a.clone()]);
    let avg3 = fixed_baseline(Combiner::Average, &grid, 3).unwrap();
    let med3 = fixed_baseline(Combiner::Median, &grid, 3).unwrap();
    assert_eq!(avg3.predict(&same, &x).unwrap(), a);
    assert_eq!(med3.predict(&same, &x).unwrap(), a);
}

#[test]
fn qra_recovers_linear_coefficients() {
    let grid = QuantileGrid::even(5);
    let n = 4000;
    let mut rng = seed::rng(61);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let z: Vec<f64> = grid
        .levels()
        .iter()
        .map(|&t| Gaussian::new(0.0, 0.3).unwrap().quantile(t))
        .collect();
    let (mut b1, mut b2) = (Mat::zeros(n, 5), Mat::zeros(n, 5));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let (u, v) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        y.push(0.3 * u + 0.7 * v + noise.sample(&mut rng));
        for t in 0..5 {
            b1.data[i * 5 + t] = u + z[t];
            b2.data[i * 5 + t] = v + z[t];
        }
    }
    let c = cube(&[b1, b2]);
    let x = Mat::zeros(n, 1);
    let cfg = AggregatorConfig {
        max_epochs: 300,
        ..config()
    };
    let agg = fit_combiner(Trainable::Qra, &cfg, &grid, AggData { cube: &c, x: &x, y: &y }, None).unwrap();
    let Combiner::Qra { params } = &agg.combiner else { panic!() };
    let w = &params.tensors[0].data;
    for t in 0..5 {
        assert!((w[2 * t] - 0.3).abs() < 0.1, "level {t}: {}", w[2 * t]);
        assert!((w[2 * t + 1] - 0.7).abs() < 0.1, "level {t}: {}", w[2 * t + 1]);
    }
}

#[test]
fn isotonized_predictions_are_monotone() {
    let grid = QuantileGrid::even(9);
    let tr = draw(71, 800, &grid);
    let mut rng = seed::rng(72);
    let wild = Mat {
        rows: tr.y.len(),
        cols: 9,
        data: (0..tr.y.len() * 9).map(|_| rng.random_range(-2.0..2.0)).collect(),
    };
    let c = cube(&[wild, tr.truth.clone()]);
    for iso in [
        IsoMode::Post(IsoOperator::Sort),
        IsoMode::Post(IsoOperator::Pava),
        IsoMode::EndToEnd(IsoOperator::MinMaxSweep),
        IsoMode::EndToEnd(IsoOperator::Sort),
    ] {
        let cfg = AggregatorConfig {
            iso,
            max_epochs: 10,
            ..config()
        };
        let agg = fit_local(Resolution::Fine, &cfg, &grid, AggData { cube: &c, x: &tr.x, y: &tr.y }, None).unwrap();
        let q = agg.predict(&c, &tr.x).unwrap();
        assert!(q.iter_rows().all(is_nondecreasing), "{iso:?}");
    }
}

#[test]
fn in_sample_cubes_cannot_train() {
    let grid = QuantileGrid::even(3);
    let tr = draw(81, 50, &grid);
    let c = BasePredCube::from_models(&[tr.truth.clone()], Provenance::InSample).unwrap();
    let err = fit_global(Resolution::Coarse, &config(), &grid, AggData { cube: &c, x: &tr.x, y: &tr.y }, None);
    assert!(matches!(err, Err(qagg::Error::Provenance(_))));
}

#[test]
fn fitted_aggregator_round_trips_through_json() {
    let grid = QuantileGrid::even(3);
    let tr = draw(91, 200, &grid);
    let c = cube(&[tr.truth.clone(), perturb(&tr.truth, |_, _| 1.0)]);
    let cfg = AggregatorConfig {
        max_epochs: 3,
        ..config()
    };
    let agg = fit_local(Resolution::Medium, &cfg, &grid, AggData { cube: &c, x: &tr.x, y: &tr.y }, None).unwrap();
    let back: FittedAggregator = serde_json::from_str(&serde_json::to_string(&agg).unwrap()).unwrap();
    assert_eq!(agg.predict(&c, &tr.x).unwrap(), back.predict(&c, &tr.x).unwrap());
}
