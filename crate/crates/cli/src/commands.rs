//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::Rng;

use qagg::aggregator::Trainable;
use qagg::conformal::{self, count_inversions, nested_conformalize, summarize, write_summary_csv};
use qagg::distlab::{figure_table, tail_ratio_profile, write_figure_csv, Gaussian};
use qagg::harness::{
    emit_report, fit_base_models, fit_ensemble, fmt_sig, generate, ingest_csv, prepare_split, run_experiment,
    split_indices, tune_base_models, Dataset, EnsembleBundle, ExperimentConfig, Method, Report, ReportFormat,
    SyntheticKind,
};
use qagg::isotonic::{self, is_nondecreasing, IsoOperator};
use qagg::scoring::{self, empirical_quantile, QuantileGrid};
use qagg::{Error, Mat, Result};

use crate::Common;

const SYNTHETIC: [SyntheticKind; 4] = [
    SyntheticKind::LinearGaussian,
    SyntheticKind::Heteroskedastic,
    SyntheticKind::TwoRegime,
    SyntheticKind::HeavyTailed,
];

fn init_workers(workers: Option<usize>) -> Result<()> {
    if let Some(n) = workers {
        if n == 0 {
            return Err(Error::Config("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?;
    }
    Ok(())
}

/// Configuration file (if any) with command-line overrides applied.
fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if let Some(m) = common.levels {
        cfg.levels = m;
    }
    if let Some(k) = common.folds {
        cfg.folds = k;
    }
    if let Some(a) = &common.alphas {
        cfg.alphas = a.clone();
    }
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    init_workers(common.workers)?;
    Ok(cfg)
}

fn load_data(common: &Common) -> Result<Dataset> {
    match &common.data {
        Some(path) => {
            let (data, rejected) = ingest_csv(path, &common.target).map_err(|e| match e {
                Error::Io(_) | Error::Csv(_) => Error::Data(format!("{}: {e}", path.display())),
                other => other,
            })?;
            for r in rejected.iter().take(10) {
                warn!("line {}: {}", r.line, r.reason);
            }
            if !rejected.is_empty() {
                warn!("skipped {} malformed rows of {}", rejected.len(), path.display());
            }
            info!("loaded {} rows × {} features from {}", data.len(), data.columns.len(), path.display());
            Ok(data)
        }
        None => {
            let kind: SyntheticKind = common.synthetic.parse()?;
            generate(kind, common.rows, common.features, common.data_seed)
        }
    }
}

fn out_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    Ok(dir.to_path_buf())
}

fn first_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seeds.first().copied().unwrap_or(0)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = std::io::BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}

fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

pub fn train(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let data = load_data(common)?;
    let seed = first_seed(&cfg);
    let bundle = fit_base_models(&cfg, &data, seed)?;
    let dir = out_dir(&common.out_dir)?;
    for (kind, wis) in bundle.kinds.iter().zip(&bundle.validation_wis) {
        println!("{:<40} validation WIS {}", kind.label(), fmt_sig(wis * bundle.standardization.y_sd));
    }
    let path = dir.join("base_models.json");
    write_json(&path, &bundle)?;
    info!("wrote {}", path.display());
    Ok(())
}

pub fn aggregate(common: &Common, method: &str) -> Result<()> {
    let cfg = load_config(common)?;
    let method: Method = method.parse()?;
    let data = load_data(common)?;
    let seed = first_seed(&cfg);
    let (bundle, prep) = fit_ensemble(&cfg, &data, seed, method)?;
    let preds = bundle.ensemble.predict(&prep.x_test)?;
    let preds = prep.standardization.inverse_quantiles(&preds);
    let wis = scoring::mean_wis_rows(bundle.grid(), &preds, &prep.y_test)?;
    println!("{} test WIS {}", method.name(), fmt_sig(wis));
    let dir = out_dir(&common.out_dir)?;
    let path = dir.join("ensemble.json");
    bundle.save(&path)?;
    info!("wrote {}", path.display());
    Ok(())
}

/// Reorders `data`'s feature columns to match `columns`.
fn align_columns(data: &Dataset, columns: &[String]) -> Result<Mat> {
    let idx = columns
        .iter()
        .map(|c| {
            data.columns
                .iter()
                .position(|d| d == c)
                .ok_or_else(|| Error::Data(format!("column `{c}` used by the model is missing")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(data.x.select_cols(&idx))
}

pub fn evaluate(common: &Common, model: &Path, all_rows: bool) -> Result<()> {
    let cfg = load_config(common)?;
    let bundle = EnsembleBundle::load(model)
        .map_err(|e| Error::Data(format!("cannot load model {}: {e}", model.display())))?;
    let data = load_data(common)?;
    let data = if all_rows {
        data
    } else {
        let split = split_indices(data.len(), cfg.train_fraction, cfg.validation_fraction, bundle.seed)?;
        data.select_rows(&split.test)
    };
    let x = align_columns(&data, &bundle.columns)?;
    let preds = bundle.predict(&x)?;
    let grid = bundle.grid().clone();
    let rows = to_rows(&preds);
    let wis = scoring::mean_wis_rows(&grid, &preds, &data.y)?;
    let median = grid.anchor_index();
    let medians: Vec<f64> = rows.iter().map(|r| r[median]).collect();
    let pve = scoring::pve(&medians, &data.y)?;
    let mut scores = serde_json::Map::new();
    scores.insert("method".into(), bundle.method.name().into());
    scores.insert("rows".into(), data.len().into());
    scores.insert("test_wis".into(), wis.into());
    scores.insert("pve".into(), pve.into());
    println!("rows {}  WIS {}  PVE {}", data.len(), fmt_sig(wis), fmt_sig(pve));
    for &alpha in &cfg.alphas {
        match scoring::coverage_and_length(&grid, &rows, &data.y, alpha) {
            Ok((cov, len)) => {
                println!("alpha {}  coverage {}  length {}", fmt_sig(alpha), fmt_sig(cov), fmt_sig(len));
                scores.insert(format!("coverage_{}", fmt_sig(alpha)), cov.into());
                scores.insert(format!("length_{}", fmt_sig(alpha)), len.into());
            }
            Err(e) => warn!("alpha {alpha} skipped: {e}"),
        }
    }
    let dir = out_dir(&common.out_dir)?;
    let mut w = csv::Writer::from_path(dir.join("predictions.csv"))?;
    let mut header = vec!["y".to_string()];
    header.extend(grid.levels().iter().map(|t| format!("q_{}", fmt_sig(*t))));
    w.write_record(&header)?;
    for (row, y) in rows.iter().zip(&data.y) {
        let mut rec = vec![fmt_sig(*y)];
        rec.extend(row.iter().map(|v| fmt_sig(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    write_json(&dir.join("scores.json"), &scores)?;
    Ok(())
}

pub fn conformalize(common: &Common, method: &str) -> Result<()> {
    let cfg = load_config(common)?;
    let combiner = match method.parse::<Method>()? {
        Method::Qra => Trainable::Qra,
        Method::Weighted { resolution, locality } => Trainable::Weighted(resolution, locality),
        other => {
            return Err(Error::Config(format!(
                "`{}` has no trainable parameters to conformalize; use qra or a weighted method",
                other.name()
            )))
        }
    };
    let data = load_data(common)?;
    let seed = first_seed(&cfg);
    let grid = cfg.grid();
    let prep = prepare_split(&data, &cfg, seed)?;
    let (kinds, _) = tune_base_models(&cfg, &prep, &data.name, seed)?;
    // calibrate on train and validation rows together
    let mut x_rows = to_rows(&prep.x_train);
    x_rows.extend(to_rows(&prep.x_val));
    let x = Mat::from_rows(&x_rows)?;
    let y: Vec<f64> = prep.y_train.iter().chain(&prep.y_val).copied().collect();
    let mut alphas = cfg.alphas.clone();
    alphas.sort_by(f64::total_cmp);
    let out = nested_conformalize(
        &kinds,
        combiner,
        &cfg.aggregator,
        &grid,
        &alphas,
        &x,
        &y,
        cfg.folds,
        seed,
        &cfg.fit,
    )?;
    info!("base-model fits per model: {:?}", out.base_fits);
    let mut intervals = out.model.intervals(&prep.x_test)?;
    conformal::destandardize(&mut intervals, prep.standardization.y_mean, prep.standardization.y_sd);
    let summary = summarize(&alphas, &intervals, &prep.y_test)?;
    for s in &summary {
        println!(
            "alpha {}  coverage {}  mean length {}  unbounded {}",
            fmt_sig(s.alpha),
            fmt_sig(s.coverage),
            fmt_sig(s.mean_length),
            s.unbounded_count
        );
    }
    let inversions = count_inversions(&intervals);
    if inversions > 0 {
        warn!("{inversions} test rows have non-nested intervals across alphas");
    }
    println!("nesting inversions {inversions}");
    let dir = out_dir(&common.out_dir)?;
    write_summary_csv(&dir.join("conformal.csv"), &summary)?;
    let mut w = csv::Writer::from_path(dir.join("intervals.csv"))?;
    let mut header = vec!["y".to_string()];
    for a in &alphas {
        header.push(format!("lo_{}", fmt_sig(*a)));
        header.push(format!("hi_{}", fmt_sig(*a)));
    }
    w.write_record(&header)?;
    for (row, y) in intervals.iter().zip(&prep.y_test) {
        let mut rec = vec![fmt_sig(*y)];
        for iv in row {
            rec.push(fmt_sig(iv.lo));
            rec.push(fmt_sig(iv.hi));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn benchmark(common: &Common, all_synthetic: bool) -> Result<()> {
    let cfg = load_config(common)?;
    let datasets = if all_synthetic {
        SYNTHETIC
            .iter()
            .map(|&k| generate(k, common.rows, common.features, common.data_seed))
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![load_data(common)?]
    };
    let mut reports = Vec::with_capacity(datasets.len());
    for data in &datasets {
        info!("benchmarking {} ({} rows, {} seeds)", data.name, data.len(), cfg.seeds.len());
        reports.push(run_experiment(&cfg, data)?);
    }
    let report = Report::merge(reports)?;
    for row in report.aggregates() {
        println!(
            "{:<16} {:<28} WIS {:<12} relative {:<10} PVE {}",
            row.dataset,
            row.method,
            fmt_sig(row.test_wis),
            row.relative_wis.map(fmt_sig).unwrap_or_else(|| "-".into()),
            fmt_sig(row.pve)
        );
    }
    let dir = out_dir(&common.out_dir)?;
    for p in emit_report(&report, &dir, &[ReportFormat::Csv, ReportFormat::Json])? {
        info!("wrote {}", p.display());
    }
    Ok(())
}

pub fn distlab(dir: &Path, means: &[f64], sds: &[f64], weights: &[f64], stride: usize) -> Result<()> {
    if means.len() != sds.len() || means.len() != weights.len() || means.is_empty() {
        return Err(Error::Config(
            "--means, --sds and --weights must list the same number of components".into(),
        ));
    }
    let dists = means
        .iter()
        .zip(sds)
        .map(|(&m, &s)| Gaussian::new(m, s))
        .collect::<Result<Vec<_>>>()?;
    let dir = out_dir(dir)?;
    let rows = figure_table(&dists, weights, stride)?;
    write_figure_csv(&rows, fs::File::create(dir.join("distlab.csv"))?)?;
    println!("wrote {} rows to {}", rows.len(), dir.join("distlab.csv").display());
    if dists.len() == 2 {
        let grid: Vec<f64> = (0..=80).map(|i| -8.0 + 0.2 * i as f64).collect();
        let profile = tail_ratio_profile(&[dists[0], dists[1]], &[weights[0], weights[1]], &grid)?;
        let mut w = csv::Writer::from_path(dir.join("tails.csv"))?;
        w.write_record(["v", "prob_ratio", "quant_ratio"])?;
        for r in &profile.rows {
            w.write_record(&[fmt_sig(r.v), fmt_sig(r.prob_ratio), fmt_sig(r.quant_ratio)])?;
        }
        w.flush()?;
        if !profile.omitted.is_empty() {
            warn!("{} tail points omitted after density underflow", profile.omitted.len());
        }
    }
    Ok(())
}

/// Randomized checks of the core invariants; any violation is a numerical failure.
pub fn proptest(cases: usize, seed: u64) -> Result<()> {
    let mut rng = qagg::seed::rng(seed);
    let mut violations = Vec::new();
    for case in 0..cases {
        let m = rng.random_range(1..=15usize);
        let v: Vec<f64> = (0..m).map(|_| rng.random_range(-10.0..10.0)).collect();
        let y: f64 = rng.random_range(-12.0..12.0);
        let grid = QuantileGrid::even(m);
        let before = scoring::pinball_sum(&grid, y, &v)?;
        for op in [IsoOperator::Sort, IsoOperator::Pava, IsoOperator::MinMaxSweep] {
            let out = isotonic::apply(op, &v, grid.anchor_index())?.values;
            if !is_nondecreasing(&out) {
                violations.push(format!("case {case}: {op:?} output not monotone"));
            }
            if isotonic::apply(op, &out, grid.anchor_index())?.values != out {
                violations.push(format!("case {case}: {op:?} moved a monotone input"));
            }
            if op != IsoOperator::MinMaxSweep && scoring::pinball_sum(&grid, y, &out)? > before + 1e-12 {
                violations.push(format!("case {case}: {op:?} raised pinball loss"));
            }
        }
        let tau: f64 = rng.random_range(0.01..0.99);
        if conformal::modified_quantile(&v, tau)? < empirical_quantile(&v, tau)? {
            violations.push(format!("case {case}: modified quantile below empirical quantile"));
        }
        let alpha = rng.random_range(1..50u32) as f64 / 100.0;
        let interval_grid = QuantileGrid::from_alphas(&[alpha])?;
        let mut q: Vec<f64> = v.iter().cycle().take(interval_grid.len()).copied().collect();
        q.sort_by(f64::total_cmp);
        let interval = scoring::wis_interval(&interval_grid, &q, y)?;
        let pinball = scoring::pinball_sum(&interval_grid, y, &q)?;
        if (interval - 2.0 * pinball).abs() > 1e-12 * (1.0 + interval) {
            violations.push(format!("case {case}: interval score {interval} != 2 × pinball {pinball}"));
        }
    }
    for v in violations.iter().take(20) {
        eprintln!("{v}");
    }
    if violations.is_empty() {
        println!("{cases} cases, no violations");
        Ok(())
    } else {
        Err(Error::Numerical(format!("{} invariant violations in {cases} cases", violations.len())))
    }
}
