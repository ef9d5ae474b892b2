use qagg::basemodels::{fit, BaseModelKind, FitOptions, FittedBaseModel};
use qagg::distlab::Gaussian;
use qagg::scoring::{empirical_quantile, mean_wis_rows, QuantileGrid};
use qagg::seed;
use qagg::Mat;
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn uniform_x(rng: &mut seed::Rng, n: usize, d: usize) -> Mat {
    Mat {
        rows: n,
        cols: d,
        data: (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

/// y = 1 + 2 x0 − x1 + N(0, 0.5²)
fn linear_gaussian(seed_value: u64, n: usize) -> (Mat, Vec<f64>) {
    let mut rng = seed::rng(seed_value);
    let x = uniform_x(&mut rng, n, 2);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let y = x
        .iter_rows()
        .map(|r| 1.0 + 2.0 * r[0] - r[1] + noise.sample(&mut rng))
        .collect();
    (x, y)
}

fn bayes_linear_gaussian(x: &Mat, grid: &QuantileGrid) -> Mat {
    let mut q = Mat::zeros(x.rows, grid.len());
    for i in 0..x.rows {
        let r = x.row(i);
        let g = Gaussian::new(1.0 + 2.0 * r[0] - r[1], 0.5).unwrap();
        for (o, &t) in q.row_mut(i).iter_mut().zip(grid.levels()) {
            *o = g.quantile(t);
        }
    }
    q
}

#[test]
fn linear_pinball_recovers_uniform_noise_quantiles() {
    let mut rng = seed::rng(11);
    let n = 5000;
    let x = uniform_x(&mut rng, n, 1);
    let y: Vec<f64> = x
        .iter_rows()
        .map(|r| 2.0 * r[0] + rng.random_range(-1.0..1.0))
        .collect();
    let grid = QuantileGrid::new(vec![0.1, 0.25, 0.5, 0.75, 0.9]).unwrap();
    let model = fit(&BaseModelKind::linear(), &x, &y, &grid, &FitOptions::default()).unwrap();
    let probe = Mat::from_rows(&[vec![-0.5], vec![0.0], vec![0.5]]).unwrap();
    let q = model.predict(&probe).unwrap();
    let slope = q.get(2, 2) - q.get(1, 2);
    assert!((slope / 0.5 - 2.0).abs() < 0.1, "median slope {}", slope / 0.5);
    for i in 0..3 {
        let width = q.get(i, 4) - q.get(i, 0);
        assert!((width - 1.6).abs() < 0.2, "q.9 − q.1 = {width}");
        // symmetric noise: median sits midway between the quartiles
        let mid = 0.5 * (q.get(i, 1) + q.get(i, 3));
        assert!((q.get(i, 2) - mid).abs() < 0.05);
    }
}

#[test]
fn linear_pinball_constant_response() {
    let mut rng = seed::rng(2);
    let x = uniform_x(&mut rng, 400, 2);
    let y = vec![3.5; 400];
    let grid = QuantileGrid::even(5);
    let model = fit(&BaseModelKind::linear(), &x, &y, &grid, &FitOptions::default()).unwrap();
    let q = model.predict(&uniform_x(&mut rng, 20, 2)).unwrap();
    assert!(q.data.iter().all(|v| (v - 3.5).abs() < 0.05));
}

#[test]
fn zero_variance_column_is_dropped() {
    let mut rng = seed::rng(5);
    let mut x = uniform_x(&mut rng, 300, 2);
    for i in 0..300 {
        x.data[2 * i + 1] = 7.0;
    }
    let y: Vec<f64> = x.iter_rows().map(|r| r[0]).collect();
    let model = fit(&BaseModelKind::linear(), &x, &y, &QuantileGrid::even(3), &FitOptions::default()).unwrap();
    match model {
        FittedBaseModel::QuantileNet(m) => assert_eq!(m.features.kept, vec![0]),
        _ => unreachable!(),
    }
}

#[test]
fn conditional_gaussian_coverage_and_shape() {
    let (x, y) = linear_gaussian(21, 4000);
    let grid = QuantileGrid::new(vec![0.1, 0.5, 0.9]).unwrap();
    let model = fit(&BaseModelKind::gaussian_linear(), &x, &y, &grid, &FitOptions::default()).unwrap();
    let (xt, yt) = linear_gaussian(22, 20_000);
    let q = model.predict(&xt).unwrap();
    let covered = (0..xt.rows)
        .filter(|&i| q.get(i, 0) <= yt[i] && yt[i] <= q.get(i, 2))
        .count() as f64
        / xt.rows as f64;
    assert!((covered - 0.8).abs() < 0.03, "coverage {covered}");
    let FittedBaseModel::Gaussian(g) = &model else { unreachable!() };
    let (mu, _) = g.mean_sd(&xt).unwrap();
    for i in 0..xt.rows {
        assert!((q.get(i, 1) - mu[i]).abs() < 1e-12);
        assert!(q.get(i, 0) < q.get(i, 1) && q.get(i, 1) < q.get(i, 2));
    }
}

#[test]
fn knn_recovers_regime_quantiles() {
    // y ~ N(0,1) when x < 0, N(5, 2²) when x ≥ 0
    let mut rng = seed::rng(8);
    let n = 4000;
    let x = uniform_x(&mut rng, n, 1);
    let std = Normal::new(0.0, 1.0).unwrap();
    let y: Vec<f64> = x
        .iter_rows()
        .map(|r| {
            let e = std.sample(&mut rng);
            if r[0] < 0.0 { e } else { 5.0 + 2.0 * e }
        })
        .collect();
    let grid = QuantileGrid::new(vec![0.1, 0.5, 0.9]).unwrap();
    let model = fit(&BaseModelKind::knn(200), &x, &y, &grid, &FitOptions::default()).unwrap();
    let q = model.predict(&Mat::from_rows(&[vec![-0.5], vec![0.5]]).unwrap()).unwrap();
    for (row, side) in [(0, -1.0), (1, 1.0)] {
        let regime: Vec<f64> = x
            .iter_rows()
            .zip(&y)
            .filter(|(r, _)| (r[0] < 0.0) == (side < 0.0))
            .map(|(_, &v)| v)
            .collect();
        let scale = if side < 0.0 { 1.0 } else { 2.0 };
        for (k, &t) in grid.levels().iter().enumerate() {
            let oracle = empirical_quantile(&regime, t).unwrap();
            // sampling error of a quantile from 200 draws is ≈ 0.1–0.2 sd
            assert!((q.get(row, k) - oracle).abs() < 0.35 * scale, "level {t}");
        }
    }
}

fn dqr_kind() -> BaseModelKind {
    BaseModelKind::dqr(&[32, 32])
}

#[test]
fn dqr_post_sort_prevents_crossing() {
    // heteroskedastic 1-d data in the style of bone density curves
    let mut rng = seed::rng(31);
    let n = 1500;
    let x = uniform_x(&mut rng, n, 1);
    let std = Normal::new(0.0, 1.0).unwrap();
    let y: Vec<f64> = x
        .iter_rows()
        .map(|r| (3.0 * r[0]).sin() + (0.1 + 0.4 * (r[0] + 1.0)) * std.sample(&mut rng))
        .collect();
    let grid = QuantileGrid::even(19);
    let opts = FitOptions {
        max_epochs: 60,
        ..Default::default()
    };
    let model = fit(&dqr_kind(), &x, &y, &grid, &opts).unwrap();
    let probe = Mat {
        rows: 401,
        cols: 1,
        data: (0..401).map(|i| -1.2 + 2.4 * i as f64 / 400.0).collect(),
    };
    let q = model.predict(&probe).unwrap();
    for row in q.iter_rows() {
        assert!(row.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn dqr_close_to_bayes_and_to_gaussian_on_linear_gaussian_data() {
    let grid = QuantileGrid::even(9);
    let (x, y) = linear_gaussian(41, 4000);
    let (xt, yt) = linear_gaussian(42, 5000);
    let opts = FitOptions::default();
    let dqr = fit(&dqr_kind(), &x, &y, &grid, &opts).unwrap();
    let cg = fit(&BaseModelKind::gaussian_linear(), &x, &y, &grid, &opts).unwrap();
    let wis_dqr = mean_wis_rows(&grid, &dqr.predict(&xt).unwrap(), &yt).unwrap();
    let wis_cg = mean_wis_rows(&grid, &cg.predict(&xt).unwrap(), &yt).unwrap();
    let bayes = mean_wis_rows(&grid, &bayes_linear_gaussian(&xt, &grid), &yt).unwrap();
    eprintln!("dqr {wis_dqr:.4}  gaussian {wis_cg:.4}  bayes {bayes:.4}");
    assert!(wis_dqr <= 1.10 * bayes);
    assert!(wis_dqr <= 1.15 * wis_cg);
}

#[test]
fn dqr_without_signal_matches_unconditional_quantiles() {
    let mut rng = seed::rng(51);
    let grid = QuantileGrid::even(9);
    let make = |rng: &mut seed::Rng, n: usize| {
        let x = uniform_x(rng, n, 3);
        let noise = Normal::new(2.0, 1.5).unwrap();
        let y: Vec<f64> = (0..n).map(|_| noise.sample(rng)).collect();
        (x, y)
    };
    let (x, y) = make(&mut rng, 3000);
    let (xt, yt) = make(&mut rng, 5000);
    let model = fit(&dqr_kind(), &x, &y, &grid, &FitOptions::default()).unwrap();
    let wis = mean_wis_rows(&grid, &model.predict(&xt).unwrap(), &yt).unwrap();
    let uncond: Vec<f64> = grid
        .levels()
        .iter()
        .map(|&t| empirical_quantile(&y, t).unwrap())
        .collect();
    let oracle = Mat {
        rows: xt.rows,
        cols: grid.len(),
        data: (0..xt.rows).flat_map(|_| uncond.clone()).collect(),
    };
    let wis_oracle = mean_wis_rows(&grid, &oracle, &yt).unwrap();
    eprintln!("dqr {wis:.4} unconditional {wis_oracle:.4}");
    assert!(wis <= 1.05 * wis_oracle);
}

#[test]
fn fitting_is_deterministic() {
    let (x, y) = linear_gaussian(61, 500);
    let grid = QuantileGrid::even(5);
    let opts = FitOptions {
        max_epochs: 20,
        ..Default::default()
    };
    for kind in [BaseModelKind::linear(), BaseModelKind::gaussian_linear(), dqr_kind()] {
        let a = fit(&kind, &x, &y, &grid, &opts).unwrap();
        let b = fit(&kind, &x, &y, &grid, &opts).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn checkpoints_round_trip_through_json() {
    let (x, y) = linear_gaussian(71, 300);
    let grid = QuantileGrid::even(5);
    let opts = FitOptions {
        max_epochs: 5,
        ..Default::default()
    };
    for kind in [BaseModelKind::linear(), BaseModelKind::gaussian_linear(), BaseModelKind::knn(10), dqr_kind()] {
        let model = fit(&kind, &x, &y, &grid, &opts).unwrap();
        let json = serde_json::to_string(&model).unwrap();
        let back: FittedBaseModel = serde_json::from_str(&json).unwrap();
        assert_eq!(model.predict(&x).unwrap(), back.predict(&x).unwrap());
    }
}
