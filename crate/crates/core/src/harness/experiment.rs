//! The experiment workflow: standardize, tune base models on validation WIS,
//! build the out-of-fold cube, fit and tune aggregators, report test scores.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{split_indices, Dataset, Split, Standardization};
use super::report::{Report, ReportRow, RowKind, TuningRecord};
use crate::aggregator::{
    build_oof_cube, fit_combiner, fixed_baseline, predict_cube, select, AggData, AggregatorConfig,
    BasePredCube, Combiner, Ensemble, FitCounter, FittedAggregator, IsoMode, Locality, MarginScheme, Provenance,
    Resolution, Trainable, CROSSING_WEIGHT_GRID, MARGIN_SCALE_GRID,
};
use crate::basemodels::{self, BaseModelKind, FitOptions, FittedBaseModel};
use crate::error::{Error, Result};
use crate::isotonic::IsoOperator;
use crate::linalg::Mat;
use crate::scoring::{self, QuantileGrid};
use crate::seed;

/// An aggregation method in the comparison roster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Average,
    Median,
    Qra,
    Weighted { resolution: Resolution, locality: Locality },
}

impl Method {
    /// The local-fine aggregator (DQA), the reference for relative WIS.
    pub const DQA: Method = Method::Weighted {
        resolution: Resolution::Fine,
        locality: Locality::Local,
    };

    pub fn name(self) -> String {
        match self {
            Method::Average => "average".into(),
            Method::Median => "median".into(),
            Method::Qra => "qra".into(),
            Method::Weighted { resolution, locality } => {
                let loc = match locality {
                    Locality::Global => "global",
                    Locality::Local => "local",
                };
                format!("{}_{loc}", resolution.name())
            }
        }
    }

    /// Every method: the three baselines and the six weighted schemes.
    pub fn roster() -> Vec<Method> {
        let mut out = vec![Method::Average, Method::Median, Method::Qra];
        for locality in [Locality::Global, Locality::Local] {
            for resolution in [Resolution::Coarse, Resolution::Medium, Resolution::Fine] {
                out.push(Method::Weighted { resolution, locality });
            }
        }
        out
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => return Ok(Method::Average),
            "median" => return Ok(Method::Median),
            "qra" => return Ok(Method::Qra),
            "dqa" => return Ok(Method::DQA),
            _ => {}
        }
        let (res, loc) = s
            .split_once('_')
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))?;
        let locality = match loc {
            "global" => Locality::Global,
            "local" => Locality::Local,
            _ => return Err(Error::Config(format!("unknown method `{s}`"))),
        };
        Ok(Method::Weighted {
            resolution: res.parse()?,
            locality,
        })
    }
}

/// Candidate hyperparameter settings for one base model; the one with the
/// lowest validation WIS is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseFamily {
    pub candidates: Vec<BaseModelKind>,
}

impl BaseFamily {
    pub fn single(kind: BaseModelKind) -> Self {
        BaseFamily { candidates: vec![kind] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub seeds: Vec<u64>,
    pub folds: usize,
    /// Number of evenly spaced levels `i/(m+1)`.
    pub levels: usize,
    /// Miscoverage levels for the coverage / length columns.
    pub alphas: Vec<f64>,
    pub base_models: Vec<BaseFamily>,
    pub methods: Vec<Method>,
    /// Crossing-penalty weights tried for weighted methods.
    pub crossing_weights: Vec<f64>,
    /// Adaptive-margin scales tried for weighted methods.
    pub margin_scales: Vec<f64>,
    pub aggregator: AggregatorConfig,
    pub fit: FitOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train_fraction: 0.72,
            validation_fraction: 0.18,
            seeds: (0..5).collect(),
            folds: 5,
            levels: 99,
            alphas: vec![0.1, 0.2, 0.5],
            base_models: vec![
                BaseFamily {
                    candidates: [0.0, 1e-4, 1e-2]
                        .iter()
                        .map(|&wd| BaseModelKind::LinearPinball {
                            weight_decay: wd,
                            learning_rate: 1e-2,
                        })
                        .collect(),
                },
                BaseFamily::single(BaseModelKind::gaussian_linear()),
                BaseFamily {
                    candidates: [10, 25, 50, 100].iter().map(|&k| BaseModelKind::knn(k)).collect(),
                },
                BaseFamily {
                    candidates: vec![BaseModelKind::dqr(&[64, 64]), BaseModelKind::dqr(&[128, 128])],
                },
            ],
            methods: Method::roster(),
            crossing_weights: CROSSING_WEIGHT_GRID.to_vec(),
            margin_scales: MARGIN_SCALE_GRID.to_vec(),
            aggregator: AggregatorConfig::default(),
            fit: FitOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn grid(&self) -> QuantileGrid {
        QuantileGrid::even(self.levels)
    }

    pub fn validate(&self) -> Result<()> {
        let test = 1.0 - self.train_fraction - self.validation_fraction;
        if !(self.train_fraction > 0.0 && self.validation_fraction > 0.0 && test > 0.0) {
            return Err(Error::Config(format!(
                "split fractions {}/{} must be positive and leave a test split",
                self.train_fraction, self.validation_fraction
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("need at least 2 folds, got {}", self.folds)));
        }
        if self.levels < 2 {
            return Err(Error::Config("need at least 2 quantile levels".into()));
        }
        if self.base_models.is_empty() || self.base_models.iter().any(|f| f.candidates.is_empty()) {
            return Err(Error::Config("every base model needs at least one candidate".into()));
        }
        if self.crossing_weights.is_empty() || self.margin_scales.is_empty() {
            return Err(Error::Config("empty aggregator tuning grid".into()));
        }
        let grid = self.grid();
        for &a in &self.alphas {
            grid.interval_indices(a)?;
        }
        self.aggregator.validate()
    }
}

/// Standardized train / validation / test views of one seed's split.
#[derive(Debug, Clone)]
pub struct PreparedSplit {
    pub split: Split,
    /// Fitted on the train and validation rows only.
    pub standardization: Standardization,
    pub x_train: Mat,
    pub y_train: Vec<f64>,
    pub x_val: Mat,
    pub y_val: Vec<f64>,
    pub x_test: Mat,
    /// Test responses in original units.
    pub y_test: Vec<f64>,
}

/// Splits `data` by `seed_value` and standardizes on the train and validation rows.
pub fn prepare_split(data: &Dataset, cfg: &ExperimentConfig, seed_value: u64) -> Result<PreparedSplit> {
    let split = split_indices(data.len(), cfg.train_fraction, cfg.validation_fraction, seed_value)?;
    check_no_leakage(&split, data.len())?;
    let fit_rows: Vec<usize> = split.train.iter().chain(&split.validation).copied().collect();
    let standardization = Standardization::fit(data, &fit_rows)?;
    let xs = standardization.transform_x(&data.x);
    let ys = standardization.transform_y(&data.y);
    Ok(PreparedSplit {
        x_train: xs.select_rows(&split.train),
        y_train: select(&ys, &split.train),
        x_val: xs.select_rows(&split.validation),
        y_val: select(&ys, &split.validation),
        x_test: xs.select_rows(&split.test),
        y_test: select(&data.y, &split.test),
        split,
        standardization,
    })
}

/// Test rows must not appear in any fitting split.
fn check_no_leakage(split: &Split, n: usize) -> Result<()> {
    let mut owner = vec![0u8; n];
    for (tag, rows) in [(1u8, &split.train), (2, &split.validation), (3, &split.test)] {
        for &i in rows {
            if owner[i] != 0 {
                return Err(Error::Provenance(format!(
                    "row {i} belongs to more than one split"
                )));
            }
            owner[i] = tag;
        }
    }
    Ok(())
}

/// Scores for one method on one seed, in response units.
struct Scored {
    test_wis: f64,
    pve: f64,
    coverage: Vec<f64>,
    length: Vec<f64>,
}

fn score(grid: &QuantileGrid, alphas: &[f64], preds: &Mat, y: &[f64]) -> Result<Scored> {
    let test_wis = scoring::mean_wis_rows(grid, preds, y)?;
    let mid = grid.median_index().unwrap_or_else(|| grid.anchor_index());
    let medians: Vec<f64> = preds.iter_rows().map(|q| q[mid]).collect();
    let pve = scoring::pve(&medians, y)?;
    let rows: Vec<Vec<f64>> = preds.iter_rows().map(<[f64]>::to_vec).collect();
    let mut coverage = Vec::with_capacity(alphas.len());
    let mut length = Vec::with_capacity(alphas.len());
    for &a in alphas {
        let (c, l) = scoring::coverage_and_length(grid, &rows, y, a)?;
        coverage.push(c);
        length.push(l);
    }
    Ok(Scored {
        test_wis,
        pve,
        coverage,
        length,
    })
}

/// Post-sorting and post-PAVA cannot increase the pinball loss; a violation
/// means a numerical fault somewhere upstream.
fn check_post_iso(grid: &QuantileGrid, agg: &FittedAggregator, cube: &BasePredCube, x: &Mat, y: &[f64]) -> Result<()> {
    let op = match agg.iso {
        IsoMode::Post(op) | IsoMode::EndToEnd(op) => op,
        IsoMode::None => return Ok(()),
    };
    if !matches!(op, IsoOperator::Sort | IsoOperator::Pava) {
        return Ok(());
    }
    let raw = scoring::mean_wis_rows(grid, &agg.combine(cube, x)?, y)?;
    let post = scoring::mean_wis_rows(grid, &agg.predict(cube, x)?, y)?;
    if post > raw + 1e-9 * (1.0 + raw.abs()) {
        return Err(Error::Numerical(format!(
            "post isotonization raised test WIS from {raw} to {post}"
        )));
    }
    Ok(())
}

struct Candidate {
    choice: String,
    validation_wis: f64,
    aggregator: FittedAggregator,
}

fn fit_method(
    method: Method,
    cfg: &ExperimentConfig,
    grid: &QuantileGrid,
    seed_value: u64,
    train: AggData<'_>,
    val: AggData<'_>,
) -> Result<Candidate> {
    let p = train.cube.p;
    let validation_wis = |agg: &FittedAggregator| -> Result<f64> {
        scoring::mean_wis_rows(grid, &agg.predict(val.cube, val.x)?, val.y)
    };
    let trainable = match method {
        Method::Average | Method::Median => {
            let combiner = if method == Method::Average {
                Combiner::Average
            } else {
                Combiner::Median
            };
            let aggregator = fixed_baseline(combiner, grid, p)?;
            return Ok(Candidate {
                choice: "fixed".into(),
                validation_wis: validation_wis(&aggregator)?,
                aggregator,
            });
        }
        Method::Qra => Trainable::Qra,
        Method::Weighted { resolution, locality } => Trainable::Weighted(resolution, locality),
    };
    let method_seed = seed::derive_str(seed_value, &method.name());
    let settings: Vec<(f64, f64)> = match method {
        // QRA has no crossing penalty
        Method::Qra => vec![(0.0, 0.0)],
        _ => cfg
            .crossing_weights
            .iter()
            .flat_map(|&l| cfg.margin_scales.iter().map(move |&d| (l, d)))
            .collect(),
    };
    let fitted: Vec<Result<Candidate>> = settings
        .par_iter()
        .map(|&(lambda, delta0)| {
            let agg_cfg = AggregatorConfig {
                crossing_weight: lambda,
                margins: MarginScheme::Adaptive(delta0),
                seed: method_seed,
                ..cfg.aggregator.clone()
            };
            let aggregator = fit_combiner(trainable, &agg_cfg, grid, train, Some(val))?;
            Ok(Candidate {
                choice: format!("crossing_weight={lambda} margin_scale={delta0}"),
                validation_wis: validation_wis(&aggregator)?,
                aggregator,
            })
        })
        .collect();
    let mut best: Option<Candidate> = None;
    for c in fitted {
        let c = c?;
        // strict improvement keeps the first of tied candidates
        if best.as_ref().is_none_or(|b| c.validation_wis < b.validation_wis) {
            best = Some(c);
        }
    }
    Ok(best.expect("tuning grid is nonempty"))
}

/// Picks, per base model family, the candidate with the lowest validation
/// WIS after fitting on the training rows.
pub fn tune_base_models(
    cfg: &ExperimentConfig,
    prep: &PreparedSplit,
    dataset: &str,
    seed_value: u64,
) -> Result<(Vec<BaseModelKind>, Vec<TuningRecord>)> {
    let grid = cfg.grid();
    let mut tuning = Vec::new();
    let mut chosen = Vec::with_capacity(cfg.base_models.len());
    for (j, family) in cfg.base_models.iter().enumerate() {
        if family.candidates.len() == 1 {
            chosen.push(family.candidates[0].clone());
            continue;
        }
        let tuning_seed = seed::derive_str(seed_value, "base-tuning");
        let scores: Vec<Result<f64>> = family
            .candidates
            .par_iter()
            .enumerate()
            .map(|(c, kind)| {
                let opts = cfg.fit.with_seed(seed::derive(tuning_seed, (j * 1000 + c) as u64));
                let model = basemodels::fit(kind, &prep.x_train, &prep.y_train, &grid, &opts)?;
                scoring::mean_wis_rows(&grid, &model.predict(&prep.x_val)?, &prep.y_val)
            })
            .collect();
        let mut best = (f64::INFINITY, 0);
        for (c, s) in scores.into_iter().enumerate() {
            let s = s.map_err(|e| e.in_stage("base tuning"))?;
            if s < best.0 {
                best = (s, c);
            }
        }
        tuning.push(TuningRecord {
            dataset: dataset.to_string(),
            seed: seed_value,
            method: format!("base:{j}"),
            choice: serde_json::to_string(&family.candidates[best.1])?,
            validation_wis: best.0,
        });
        chosen.push(family.candidates[best.1].clone());
    }
    Ok((chosen, tuning))
}

struct SeedOutcome {
    rows: Vec<ReportRow>,
    tuning: Vec<TuningRecord>,
}

fn run_seed(data: &Dataset, cfg: &ExperimentConfig, seed_value: u64) -> Result<SeedOutcome> {
    let grid = cfg.grid();
    let prep = prepare_split(data, cfg, seed_value).map_err(|e| e.in_stage("standardize"))?;
    let (chosen, mut tuning) = tune_base_models(cfg, &prep, &data.name, seed_value)?;

    let counter = FitCounter::new(chosen.len());
    let oof = build_oof_cube(
        &chosen,
        &prep.x_train,
        &prep.y_train,
        &grid,
        cfg.folds,
        seed_value,
        &cfg.fit,
        &counter,
    )
    .map_err(|e| e.in_stage("out-of-fold predictions"))?;
    let val_cube = predict_cube(&oof.full_models, &prep.x_val, Provenance::External)?;
    let test_cube = predict_cube(&oof.full_models, &prep.x_test, Provenance::External)?;
    let train = AggData {
        cube: &oof.cube,
        x: &prep.x_train,
        y: &prep.y_train,
    };
    let val = AggData {
        cube: &val_cube,
        x: &prep.x_val,
        y: &prep.y_val,
    };

    let fitted: Vec<Result<Candidate>> = cfg
        .methods
        .par_iter()
        .map(|&m| {
            fit_method(m, cfg, &grid, seed_value, train, val)
                .map_err(|e| e.in_stage("aggregator fit"))
        })
        .collect();

    let std = &prep.standardization;
    let mut scored: Vec<(String, Scored)> = Vec::new();
    for (j, kind) in chosen.iter().enumerate() {
        let preds = std.inverse_quantiles(&test_cube.model(j));
        scored.push((format!("base_{}", kind.label()), score(&grid, &cfg.alphas, &preds, &prep.y_test)?));
    }
    for (method, cand) in cfg.methods.iter().zip(fitted) {
        let cand = cand?;
        check_post_iso(&grid, &cand.aggregator, &test_cube, &prep.x_test, &std.transform_y(&prep.y_test))
            .map_err(|e| e.in_stage("report"))?;
        let preds = std.inverse_quantiles(&cand.aggregator.predict(&test_cube, &prep.x_test)?);
        scored.push((method.name(), score(&grid, &cfg.alphas, &preds, &prep.y_test).map_err(|e| e.in_stage("report"))?));
        tuning.push(TuningRecord {
            dataset: data.name.clone(),
            seed: seed_value,
            method: method.name(),
            choice: cand.choice,
            validation_wis: cand.validation_wis,
        });
    }

    let reference = Method::DQA.name();
    let reference_wis = scored.iter().find(|(n, _)| *n == reference).map(|(_, s)| s.test_wis);
    let rows = scored
        .into_iter()
        .map(|(method, s)| ReportRow {
            kind: RowKind::Detail,
            dataset: data.name.clone(),
            seed: Some(seed_value),
            method,
            seeds: 1,
            test_wis: s.test_wis,
            test_wis_se: None,
            relative_wis: reference_wis.map(|r| s.test_wis / r),
            relative_wis_se: None,
            pve: s.pve,
            coverage: s.coverage,
            length: s.length,
        })
        .collect();
    Ok(SeedOutcome { rows, tuning })
}

/// Runs every configured seed on one dataset; seeds run concurrently and are
/// reported in configuration order.
pub fn run_experiment(cfg: &ExperimentConfig, data: &Dataset) -> Result<Report> {
    cfg.validate()?;
    let outcomes: Vec<Result<SeedOutcome>> = cfg
        .seeds
        .par_iter()
        .map(|&s| run_seed(data, cfg, s))
        .collect();
    let mut rows = Vec::new();
    let mut tuning = Vec::new();
    for o in outcomes {
        let o = o?;
        rows.extend(o.rows);
        tuning.extend(o.tuning);
    }
    Ok(Report::from_details(cfg.alphas.clone(), &Method::DQA.name(), rows, tuning))
}

/// Tuned base models fitted on one seed's training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseBundle {
    pub dataset: String,
    pub seed: u64,
    pub columns: Vec<String>,
    pub standardization: Standardization,
    pub grid: QuantileGrid,
    pub kinds: Vec<BaseModelKind>,
    pub models: Vec<FittedBaseModel>,
    /// Validation WIS per model, standardized scale.
    pub validation_wis: Vec<f64>,
    pub tuning: Vec<TuningRecord>,
}

pub fn fit_base_models(cfg: &ExperimentConfig, data: &Dataset, seed_value: u64) -> Result<BaseBundle> {
    cfg.validate()?;
    let grid = cfg.grid();
    let prep = prepare_split(data, cfg, seed_value).map_err(|e| e.in_stage("standardize"))?;
    let (kinds, tuning) = tune_base_models(cfg, &prep, &data.name, seed_value)?;
    let fitted: Vec<Result<FittedBaseModel>> = kinds
        .par_iter()
        .enumerate()
        .map(|(j, kind)| {
            let opts = cfg.fit.with_seed(seed::derive(seed::derive_str(seed_value, "base"), j as u64));
            basemodels::fit(kind, &prep.x_train, &prep.y_train, &grid, &opts)
        })
        .collect();
    let models = fitted
        .into_iter()
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("base model fit"))?;
    let validation_wis = models
        .iter()
        .map(|m| scoring::mean_wis_rows(&grid, &m.predict(&prep.x_val)?, &prep.y_val))
        .collect::<Result<Vec<_>>>()?;
    Ok(BaseBundle {
        dataset: data.name.clone(),
        seed: seed_value,
        columns: data.columns.clone(),
        standardization: prep.standardization,
        grid,
        kinds,
        models,
        validation_wis,
        tuning,
    })
}

/// A fitted ensemble with the standardization it was trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleBundle {
    pub dataset: String,
    pub seed: u64,
    pub method: Method,
    /// Feature columns, in the order `predict` expects.
    pub columns: Vec<String>,
    pub standardization: Standardization,
    pub ensemble: Ensemble,
    pub tuning: Vec<TuningRecord>,
}

impl EnsembleBundle {
    pub fn grid(&self) -> &QuantileGrid {
        &self.ensemble.aggregator.grid
    }

    /// Quantiles in response units for raw (unstandardized) features.
    pub fn predict(&self, x: &Mat) -> Result<Mat> {
        if x.cols != self.columns.len() {
            return Err(Error::Shape(format!(
                "model expects {} feature columns, got {}",
                self.columns.len(),
                x.cols
            )));
        }
        let xs = self.standardization.transform_x(x);
        Ok(self.standardization.inverse_quantiles(&self.ensemble.predict(&xs)?))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }
}

/// Runs the workflow for one seed and one method, returning the fitted
/// ensemble and the split it was fitted on.
pub fn fit_ensemble(
    cfg: &ExperimentConfig,
    data: &Dataset,
    seed_value: u64,
    method: Method,
) -> Result<(EnsembleBundle, PreparedSplit)> {
    cfg.validate()?;
    let grid = cfg.grid();
    let prep = prepare_split(data, cfg, seed_value).map_err(|e| e.in_stage("standardize"))?;
    let (kinds, mut tuning) = tune_base_models(cfg, &prep, &data.name, seed_value)?;
    let counter = FitCounter::new(kinds.len());
    let oof = build_oof_cube(&kinds, &prep.x_train, &prep.y_train, &grid, cfg.folds, seed_value, &cfg.fit, &counter)
        .map_err(|e| e.in_stage("out-of-fold predictions"))?;
    let val_cube = predict_cube(&oof.full_models, &prep.x_val, Provenance::External)?;
    let train = AggData {
        cube: &oof.cube,
        x: &prep.x_train,
        y: &prep.y_train,
    };
    let val = AggData {
        cube: &val_cube,
        x: &prep.x_val,
        y: &prep.y_val,
    };
    let cand = fit_method(method, cfg, &grid, seed_value, train, val).map_err(|e| e.in_stage("aggregator fit"))?;
    tuning.push(TuningRecord {
        dataset: data.name.clone(),
        seed: seed_value,
        method: method.name(),
        choice: cand.choice,
        validation_wis: cand.validation_wis,
    });
    let bundle = EnsembleBundle {
        dataset: data.name.clone(),
        seed: seed_value,
        method,
        columns: data.columns.clone(),
        standardization: prep.standardization.clone(),
        ensemble: Ensemble {
            base_models: oof.full_models,
            aggregator: cand.aggregator,
        },
        tuning,
    };
    Ok((bundle, prep))
}
