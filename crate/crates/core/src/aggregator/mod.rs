//! Weighted ensembles of base quantile models.
//!
//! Base predictions enter as an out-of-fold [`BasePredCube`]. Combiners are
//! coarse, medium or fine softmax weights, either global or emitted per input
//! by a gating network, plus the average, median and QRA baselines. Training
//! minimizes pinball loss plus a crossing penalty with optional
//! end-to-end isotonization; predictions are post-isotonized as configured.

mod cube;
mod fit;
mod weights;

use serde::{Deserialize, Serialize};

pub use cube::{
    assign_folds, build_oof_cube, predict_cube, BasePredCube, FitCounter, OofOutput, Provenance,
};
pub(crate) use cube::{fit_seed, select};
pub use fit::{
    fit_combiner, fixed_baseline, margin_table, pilot_residuals, AggData, Combiner,
    FittedAggregator, TrainSummary, Trainable, FINE_DIAGONAL_INIT,
};
pub use weights::{
    adaptive_margins, apply_weights, crossing_penalty, MarginTable, WeightSpec, SIMPLEX_TOL,
};

use crate::basemodels::FittedBaseModel;
use crate::error::{Error, Result};
use crate::isotonic::IsoOperator;
use crate::linalg::Mat;
pub use crate::neuralnet::Resolution;
use crate::scoring::QuantileGrid;

/// Crossing-penalty weights searched during tuning.
pub const CROSSING_WEIGHT_GRID: [f64; 5] = [0.5, 1.0, 2.0, 5.0, 10.0];
/// Adaptive-margin scales searched during tuning.
pub const MARGIN_SCALE_GRID: [f64; 5] = [1e-1, 5e-2, 1e-2, 1e-3, 1e-4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Locality {
    Global,
    Local,
}

/// When an isotonization operator is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "operator", rename_all = "snake_case")]
pub enum IsoMode {
    None,
    /// Applied to predictions only.
    Post(IsoOperator),
    /// Used as a layer during training and applied to predictions.
    EndToEnd(IsoOperator),
}

impl IsoMode {
    pub fn operator(self) -> Option<IsoOperator> {
        match self {
            IsoMode::None => None,
            IsoMode::Post(op) | IsoMode::EndToEnd(op) => Some(op),
        }
    }
}

impl std::str::FromStr for IsoMode {
    type Err = Error;

    /// `none`, `post:<op>` or `e2e:<op>`.
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("none") {
            return Ok(IsoMode::None);
        }
        let (mode, op) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("bad isotonization mode `{s}`")))?;
        let op: IsoOperator = op.parse()?;
        match mode {
            "post" => Ok(IsoMode::Post(op)),
            "e2e" | "end_to_end" => Ok(IsoMode::EndToEnd(op)),
            _ => Err(Error::Config(format!("bad isotonization mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginScheme {
    /// The same buffer for every level pair.
    Fixed(f64),
    /// `δ₀` times the spread of out-of-fold pilot residual quantiles.
    Adaptive(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregatorConfig {
    pub crossing_weight: f64,
    pub margins: MarginScheme,
    pub iso: IsoMode,
    /// Hidden widths of the gating network (local combiners).
    pub hidden: Vec<usize>,
    pub dropout: f64,
    /// Learning rate for gating networks.
    pub learning_rate: f64,
    /// Learning rate for global logits.
    pub global_learning_rate: f64,
    pub qra_learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience_updates: usize,
    pub batch_size: Option<usize>,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig {
            crossing_weight: 1.0,
            margins: MarginScheme::Adaptive(1e-2),
            iso: IsoMode::Post(IsoOperator::Sort),
            hidden: vec![64, 64],
            dropout: 0.0,
            learning_rate: 1e-3,
            global_learning_rate: 1e-2,
            qra_learning_rate: 1e-2,
            weight_decay: 0.0,
            max_epochs: 200,
            patience_updates: crate::neuralnet::DEFAULT_PATIENCE_UPDATES,
            batch_size: None,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

impl AggregatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.crossing_weight >= 0.0) {
            return Err(Error::Config("crossing weight must be nonnegative".into()));
        }
        match self.margins {
            MarginScheme::Fixed(d) | MarginScheme::Adaptive(d) if !(d >= 0.0) => {
                return Err(Error::Config("margins must be nonnegative".into()))
            }
            _ => {}
        }
        if [self.learning_rate, self.global_learning_rate, self.qra_learning_rate]
            .iter()
            .any(|lr| !(*lr > 0.0))
        {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Global weights at the given resolution.
pub fn fit_global(
    resolution: Resolution,
    config: &AggregatorConfig,
    grid: &QuantileGrid,
    train: AggData<'_>,
    validation: Option<AggData<'_>>,
) -> Result<FittedAggregator> {
    fit_combiner(Trainable::Weighted(resolution, Locality::Global), config, grid, train, validation)
}

/// A gating network emitting weights at the given resolution; local-fine
/// with crossing penalty and post sort is the DQA configuration.
pub fn fit_local(
    resolution: Resolution,
    config: &AggregatorConfig,
    grid: &QuantileGrid,
    train: AggData<'_>,
    validation: Option<AggData<'_>>,
) -> Result<FittedAggregator> {
    fit_combiner(Trainable::Weighted(resolution, Locality::Local), config, grid, train, validation)
}

/// Full-data base models plus a fitted combiner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub base_models: Vec<FittedBaseModel>,
    pub aggregator: FittedAggregator,
}

impl Ensemble {
    pub fn predict(&self, x: &Mat) -> Result<Mat> {
        let cube = predict_cube(&self.base_models, x, Provenance::InSample)?;
        self.aggregator.predict(&cube, x)
    }
}
