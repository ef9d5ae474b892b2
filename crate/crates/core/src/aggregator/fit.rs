//! Training of global and local weights, QRA, and the fixed baselines.

use serde::{Deserialize, Serialize};

use super::cube::BasePredCube;
use super::weights::{adaptive_margins, MarginTable, WeightSpec};
use super::{AggregatorConfig, IsoMode, Locality, MarginScheme};
use crate::basemodels::FeatureScaler;
use crate::error::{Error, Result};
use crate::isotonic::{self, IsoOperator};
use crate::linalg::Mat;
use crate::neuralnet::{
    softmax_in_place, train_until_stop, Mlp, MlpSpec, NodeId, Objective, ParamSet, Resolution,
    Tape, TrainConfig,
};
use crate::scoring::{self, QuantileGrid};
use crate::seed::{self, Rng};

/// Logit bonus on the `ν = τ` entries of freshly initialized fine weights.
pub const FINE_DIAGONAL_INIT: f64 = 2.0;

const PREDICT_CHUNK: usize = 512;

/// Training rows for an aggregator: base predictions, features, responses.
#[derive(Debug, Clone, Copy)]
pub struct AggData<'a> {
    pub cube: &'a BasePredCube,
    pub x: &'a Mat,
    pub y: &'a [f64],
}

impl AggData<'_> {
    fn check(&self) -> Result<()> {
        if self.cube.n() != self.y.len() || self.x.rows != self.y.len() {
            return Err(Error::Shape(format!(
                "cube has {} rows, features {}, responses {}",
                self.cube.n(),
                self.x.rows,
                self.y.len()
            )));
        }
        if self.y.is_empty() {
            return Err(Error::Data("empty aggregator split".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Combiner {
    /// Per-level arithmetic mean of the base models.
    Average,
    /// Per-level median of the base models (midpoint for even `p`).
    Median,
    /// Per-level linear quantile regression on the base predictions;
    /// `params[0]` holds coefficients in the medium layout, `params[1]` intercepts.
    Qra { params: ParamSet },
    /// Softmax weights shared by all inputs; `params[0]` holds the logits.
    Global {
        resolution: Resolution,
        params: ParamSet,
    },
    /// Softmax weights emitted by a gating network.
    Local {
        resolution: Resolution,
        features: FeatureScaler,
        gating: Mlp,
        params: ParamSet,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_validation_wis: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedAggregator {
    pub grid: QuantileGrid,
    pub p: usize,
    pub combiner: Combiner,
    pub iso: IsoMode,
    pub margins: MarginTable,
    pub summary: Option<TrainSummary>,
}

enum Head<'a> {
    Qra,
    Global(Resolution),
    Local(Resolution, &'a Mlp),
}

impl Head<'_> {
    /// Records the raw (pre-isotonization) combination.
    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        values: Mat,
        x: Option<Mat>,
        p: usize,
        m: usize,
        rng: Option<&mut Rng>,
    ) -> NodeId {
        let v = tape.constant(values);
        match self {
            Head::Qra => {
                let w = tape.param(params, 0);
                let b = tape.param(params, 1);
                let q = tape.mix(w, v, Resolution::Medium, p, m);
                tape.add_row(q, b)
            }
            Head::Global(res) => {
                let logits = tape.param(params, 0);
                let w = tape.softmax_groups(logits, res.group_size(p, m));
                tape.mix(w, v, *res, p, m)
            }
            Head::Local(res, mlp) => {
                let xn = tape.constant(x.expect("local heads need features"));
                let logits = mlp.forward(tape, params, xn, rng);
                let w = tape.softmax_groups(logits, res.group_size(p, m));
                tape.mix(w, v, *res, p, m)
            }
        }
    }

    fn predict(&self, params: &ParamSet, values: &Mat, x: Option<&Mat>, p: usize, m: usize) -> Mat {
        let mut out = Mat::zeros(values.rows, m);
        let idx: Vec<usize> = (0..values.rows).collect();
        for chunk in idx.chunks(PREDICT_CHUNK) {
            let mut tape = Tape::new();
            let q = self.forward(
                &mut tape,
                params,
                values.select_rows(chunk),
                x.map(|x| x.select_rows(chunk)),
                p,
                m,
                None,
            );
            let start = chunk[0] * m;
            out.data[start..start + chunk.len() * m].copy_from_slice(&tape.value(q).data);
        }
        out
    }
}

fn apply_iso_rows(q: &mut Mat, op: IsoOperator, anchor: usize) -> Result<()> {
    let m = q.cols;
    for row in q.data.chunks_mut(m) {
        let r = isotonic::apply(op, row, anchor)?;
        row.copy_from_slice(&r.values);
    }
    Ok(())
}

impl FittedAggregator {
    pub fn m(&self) -> usize {
        self.grid.len()
    }

    fn head(&self) -> Option<(Head<'_>, &ParamSet)> {
        match &self.combiner {
            Combiner::Average | Combiner::Median => None,
            Combiner::Qra { params } => Some((Head::Qra, params)),
            Combiner::Global { resolution, params } => Some((Head::Global(*resolution), params)),
            Combiner::Local {
                resolution,
                gating,
                params,
                ..
            } => Some((Head::Local(*resolution, gating), params)),
        }
    }

    fn check_inputs(&self, cube: &BasePredCube, x: &Mat) -> Result<()> {
        if cube.p != self.p || cube.m != self.m() {
            return Err(Error::Shape(format!(
                "cube is {}×{}, aggregator expects {}×{}",
                cube.p,
                cube.m,
                self.p,
                self.m()
            )));
        }
        if matches!(self.combiner, Combiner::Local { .. }) && x.rows != cube.n() {
            return Err(Error::Shape("features and cube disagree in rows".into()));
        }
        Ok(())
    }

    /// The weighted combination before any isotonization.
    pub fn combine(&self, cube: &BasePredCube, x: &Mat) -> Result<Mat> {
        self.check_inputs(cube, x)?;
        let (p, m) = (self.p, self.m());
        let n = cube.n();
        match &self.combiner {
            Combiner::Average | Combiner::Median => {
                let mut out = Mat::zeros(n, m);
                let mut buf = vec![0.0; p];
                for i in 0..n {
                    for t in 0..m {
                        for (j, b) in buf.iter_mut().enumerate() {
                            *b = cube.get(i, j, t);
                        }
                        out.data[i * m + t] = if matches!(self.combiner, Combiner::Average) {
                            buf.iter().sum::<f64>() / p as f64
                        } else {
                            buf.sort_by(f64::total_cmp);
                            if p % 2 == 1 {
                                buf[p / 2]
                            } else {
                                0.5 * (buf[p / 2 - 1] + buf[p / 2])
                            }
                        };
                    }
                }
                Ok(out)
            }
            Combiner::Local { features, .. } => {
                let z = features.transform(x)?;
                let (head, params) = self.head().unwrap();
                Ok(head.predict(params, &cube.values, Some(&z), p, m))
            }
            _ => {
                let (head, params) = self.head().unwrap();
                Ok(head.predict(params, &cube.values, None, p, m))
            }
        }
    }

    /// Combination followed by the configured isotonization, if any.
    pub fn predict(&self, cube: &BasePredCube, x: &Mat) -> Result<Mat> {
        let mut q = self.combine(cube, x)?;
        if let Some(op) = self.iso.operator() {
            apply_iso_rows(&mut q, op, self.grid.anchor_index())?;
        }
        Ok(q)
    }

    /// Simplex weights in effect at each row of `x` (one entry for global
    /// weights); `None` for combiners without simplex weights.
    pub fn weights_at(&self, x: &Mat) -> Result<Option<Vec<WeightSpec>>> {
        let (p, m) = (self.p, self.m());
        match &self.combiner {
            Combiner::Global { resolution, params } => {
                let mut w = params.tensors[0].data.clone();
                for g in w.chunks_mut(resolution.group_size(p, m)) {
                    softmax_in_place(g);
                }
                Ok(Some(vec![WeightSpec::new(*resolution, p, m, w)?]))
            }
            Combiner::Local {
                resolution,
                features,
                gating,
                params,
            } => {
                let logits = gating.predict(params, &features.transform(x)?);
                let mut out = Vec::with_capacity(x.rows);
                for row in logits.iter_rows() {
                    let mut w = row.to_vec();
                    for g in w.chunks_mut(resolution.group_size(p, m)) {
                        softmax_in_place(g);
                    }
                    out.push(WeightSpec::new(*resolution, p, m, w)?);
                }
                Ok(Some(out))
            }
            _ => Ok(None),
        }
    }
}

/// The average or median baseline (no fitting; predictions are post-sorted).
pub fn fixed_baseline(combiner: Combiner, grid: &QuantileGrid, p: usize) -> Result<FittedAggregator> {
    if !matches!(combiner, Combiner::Average | Combiner::Median) {
        return Err(Error::Config("only average and median need no fitting".into()));
    }
    Ok(FittedAggregator {
        grid: grid.clone(),
        p,
        combiner,
        iso: IsoMode::Post(IsoOperator::Sort),
        margins: MarginTable::zeros(grid.len()),
        summary: None,
    })
}

/// Pilot residuals `y − mean_j ĝ_j(x; 0.5)` (the anchor level when the grid
/// has no median).
pub fn pilot_residuals(cube: &BasePredCube, y: &[f64], grid: &QuantileGrid) -> Vec<f64> {
    let a = grid.anchor_index();
    (0..cube.n())
        .map(|i| y[i] - (0..cube.p).map(|j| cube.get(i, j, a)).sum::<f64>() / cube.p as f64)
        .collect()
}

pub fn margin_table(
    scheme: MarginScheme,
    cube: &BasePredCube,
    y: &[f64],
    grid: &QuantileGrid,
) -> Result<MarginTable> {
    match scheme {
        MarginScheme::Fixed(d) => MarginTable::constant(grid.len(), d),
        MarginScheme::Adaptive(d0) => adaptive_margins(&pilot_residuals(cube, y, grid), grid, d0),
    }
}

struct CombinerObjective<'a> {
    head: Head<'a>,
    p: usize,
    m: usize,
    grid: &'a QuantileGrid,
    train_values: Mat,
    train_x: Option<Mat>,
    train_y: Vec<f64>,
    val_values: Mat,
    val_x: Option<Mat>,
    val_y: Vec<f64>,
    crossing_weight: f64,
    margins: &'a MarginTable,
    iso: IsoMode,
}

impl Objective for CombinerObjective<'_> {
    fn train_len(&self) -> usize {
        self.train_y.len()
    }

    fn batch_loss(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        batch: &[usize],
        rng: &mut Rng,
    ) -> Result<NodeId> {
        let values = self.train_values.select_rows(batch);
        let x = self.train_x.as_ref().map(|x| x.select_rows(batch));
        let yb: Vec<f64> = batch.iter().map(|&i| self.train_y[i]).collect();
        let q = self
            .head
            .forward(tape, params, values, x, self.p, self.m, Some(rng));
        // the penalty sees the raw combination, before any isotonization layer
        let penalty = if self.crossing_weight > 0.0 {
            let pen = tape.crossing_mean(q, &self.margins.delta);
            Some(tape.scale(pen, self.crossing_weight))
        } else {
            None
        };
        let out = match self.iso {
            IsoMode::EndToEnd(op) => tape.isotonize(q, op, self.grid.anchor_index())?,
            _ => q,
        };
        let fit = tape.pinball_mean(out, &yb, self.grid.levels());
        Ok(match penalty {
            Some(pen) => tape.add(fit, pen),
            None => fit,
        })
    }

    fn validation_loss(&self, params: &ParamSet) -> Result<f64> {
        let mut q = self
            .head
            .predict(params, &self.val_values, self.val_x.as_ref(), self.p, self.m);
        if let Some(op) = self.iso.operator() {
            apply_iso_rows(&mut q, op, self.grid.anchor_index())?;
        }
        scoring::mean_wis_rows(self.grid, &q, &self.val_y)
    }
}

/// Which trainable combiner to fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Qra,
    Weighted(Resolution, Locality),
}

/// Fits a trainable combiner on out-of-fold predictions, early-stopping on
/// validation WIS (or on a seeded holdout of the training rows when no
/// validation split is given).
pub fn fit_combiner(
    kind: Trainable,
    config: &AggregatorConfig,
    grid: &QuantileGrid,
    train: AggData<'_>,
    validation: Option<AggData<'_>>,
) -> Result<FittedAggregator> {
    config.validate()?;
    train.check()?;
    train.cube.check_trainable()?;
    grid.check_len(train.cube.m)?;
    let (p, m) = (train.cube.p, train.cube.m);

    let margins = match kind {
        Trainable::Qra => MarginTable::zeros(m),
        Trainable::Weighted(..) => margin_table(config.margins, train.cube, train.y, grid)?,
    };

    let (train_rows, val_split): (Vec<usize>, Option<(Mat, Mat, Vec<f64>)>) = match validation {
        Some(v) => {
            v.check()?;
            (
                (0..train.y.len()).collect(),
                Some((v.cube.values.clone(), v.x.clone(), v.y.to_vec())),
            )
        }
        None => {
            let (fit_idx, hold) = crate::basemodels::holdout_split(
                train.y.len(),
                config.holdout_fraction,
                config.seed,
            )?;
            let split = (
                train.cube.values.select_rows(&hold),
                train.x.select_rows(&hold),
                hold.iter().map(|&i| train.y[i]).collect(),
            );
            (fit_idx, Some(split))
        }
    };
    let (val_values, val_x_raw, val_y) = val_split.unwrap();

    let mut rng = seed::rng(seed::derive_str(config.seed, "combiner-init"));
    let mut params = ParamSet::default();
    let (gating, features, resolution) = match kind {
        Trainable::Qra => {
            params.push(Mat {
                rows: 1,
                cols: m * p,
                data: vec![1.0 / p as f64; m * p],
            });
            params.push(Mat::zeros(1, m));
            (None, None, Resolution::Medium)
        }
        Trainable::Weighted(res, Locality::Global) => {
            let mut logits = Mat::zeros(1, res.weight_count(p, m));
            add_fine_diagonal(res, p, m, &mut logits.data);
            params.push(logits);
            (None, None, res)
        }
        Trainable::Weighted(res, Locality::Local) => {
            let features = FeatureScaler::fit(train.x)?;
            let spec = MlpSpec::new(
                features.output_width(),
                &config.hidden,
                res.weight_count(p, m),
                config.dropout,
            )?;
            let mlp = Mlp::init(spec, &mut params, &mut rng)?;
            let b = mlp.output_bias_index();
            params.tensors[b].data.iter_mut().for_each(|v| *v = 0.0);
            add_fine_diagonal(res, p, m, &mut params.tensors[b].data);
            (Some(mlp), Some(features), res)
        }
    };

    let scale = |x: &Mat| -> Result<Option<Mat>> {
        match &features {
            Some(f) => Ok(Some(f.transform(x)?)),
            None => Ok(None),
        }
    };
    let train_x_rows = train.x.select_rows(&train_rows);
    let head = match (&kind, &gating) {
        (Trainable::Qra, _) => Head::Qra,
        (Trainable::Weighted(res, Locality::Global), _) => Head::Global(*res),
        (Trainable::Weighted(res, Locality::Local), Some(mlp)) => Head::Local(*res, mlp),
        _ => unreachable!(),
    };
    let iso = match kind {
        Trainable::Qra => IsoMode::Post(IsoOperator::Sort),
        _ => config.iso,
    };
    let objective = CombinerObjective {
        head,
        p,
        m,
        grid,
        train_values: train.cube.values.select_rows(&train_rows),
        train_x: scale(&train_x_rows)?,
        train_y: train_rows.iter().map(|&i| train.y[i]).collect(),
        val_values,
        val_x: scale(&val_x_raw)?,
        val_y,
        crossing_weight: if kind == Trainable::Qra { 0.0 } else { config.crossing_weight },
        margins: &margins,
        iso,
    };
    let train_cfg = TrainConfig {
        learning_rate: match kind {
            Trainable::Qra => config.qra_learning_rate,
            Trainable::Weighted(_, Locality::Global) => config.global_learning_rate,
            Trainable::Weighted(_, Locality::Local) => config.learning_rate,
        },
        weight_decay: config.weight_decay,
        batch_size: config.batch_size,
        max_epochs: config.max_epochs,
        patience_updates: config.patience_updates,
        seed: seed::derive_str(config.seed, "combiner-train"),
    };
    let outcome = train_until_stop(&objective, params, &train_cfg)?;
    let summary = Some(TrainSummary {
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.epochs_run,
        best_validation_wis: outcome.best_validation,
    });
    let params = outcome.params;
    let combiner = match (kind, gating, features) {
        (Trainable::Qra, ..) => Combiner::Qra { params },
        (Trainable::Weighted(_, Locality::Global), ..) => Combiner::Global { resolution, params },
        (Trainable::Weighted(_, Locality::Local), Some(gating), Some(features)) => Combiner::Local {
            resolution,
            features,
            gating,
            params,
        },
        _ => unreachable!(),
    };
    Ok(FittedAggregator {
        grid: grid.clone(),
        p,
        combiner,
        iso,
        margins,
        summary,
    })
}

fn add_fine_diagonal(res: Resolution, p: usize, m: usize, logits: &mut [f64]) {
    if res != Resolution::Fine {
        return;
    }
    for t in 0..m {
        for j in 0..p {
            logits[t * p * m + j * m + t] += FINE_DIAGONAL_INIT;
        }
    }
}
