//! Base quantile regressors behind a common `fit` / `predict` interface.
//!
//! Every model standardizes its own features (dropping zero-variance
//! columns) and returns an `n×m` matrix of quantiles aligned to the grid.
//! The SGD-trained models hold out a seeded 10% of their training rows to
//! drive early stopping on WIS.

mod gaussian;
mod knn;
mod net;
mod preprocess;
mod quantile_net;

use serde::{Deserialize, Serialize};

pub use gaussian::GaussianModel;
pub use knn::KnnModel;
pub use net::Net;
pub use preprocess::{FeatureScaler, TargetScaler};
pub use quantile_net::QuantileNetModel;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::neuralnet::TrainConfig;
use crate::scoring::QuantileGrid;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseModelKind {
    /// One linear quantile head per level, trained jointly on the summed pinball loss.
    LinearPinball {
        #[serde(default)]
        weight_decay: f64,
        #[serde(default = "default_linear_lr")]
        learning_rate: f64,
    },
    /// Gaussian likelihood with a linear (empty `hidden`) or MLP mean and a
    /// constant or linear log standard deviation.
    ConditionalGaussian {
        #[serde(default)]
        hidden: Vec<usize>,
        #[serde(default = "yes")]
        linear_log_sd: bool,
        #[serde(default = "default_net_lr")]
        learning_rate: f64,
    },
    /// Empirical quantiles of the `k` nearest training responses.
    KnnQuantile { k: usize },
    /// MLP with an unconstrained width-`m` linear head, pinball loss plus
    /// crossing penalty, sorted at prediction time.
    Dqr {
        hidden: Vec<usize>,
        #[serde(default)]
        dropout: f64,
        #[serde(default = "one")]
        crossing_weight: f64,
        #[serde(default)]
        crossing_margin: f64,
        #[serde(default = "default_net_lr")]
        learning_rate: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

fn default_linear_lr() -> f64 {
    1e-2
}
fn default_net_lr() -> f64 {
    1e-3
}
fn yes() -> bool {
    true
}
fn one() -> f64 {
    1.0
}

impl BaseModelKind {
    pub fn linear() -> Self {
        BaseModelKind::LinearPinball {
            weight_decay: 0.0,
            learning_rate: default_linear_lr(),
        }
    }

    pub fn gaussian_linear() -> Self {
        BaseModelKind::ConditionalGaussian {
            hidden: Vec::new(),
            linear_log_sd: true,
            learning_rate: 1e-2,
        }
    }

    pub fn knn(k: usize) -> Self {
        BaseModelKind::KnnQuantile { k }
    }

    pub fn dqr(hidden: &[usize]) -> Self {
        BaseModelKind::Dqr {
            hidden: hidden.to_vec(),
            dropout: 0.0,
            crossing_weight: 1.0,
            crossing_margin: 0.0,
            learning_rate: default_net_lr(),
            weight_decay: 0.0,
        }
    }

    /// Short identifier used in reports.
    pub fn label(&self) -> String {
        match self {
            BaseModelKind::LinearPinball { .. } => "linear_pinball".into(),
            BaseModelKind::ConditionalGaussian { hidden, .. } if hidden.is_empty() => {
                "gaussian_linear".into()
            }
            BaseModelKind::ConditionalGaussian { .. } => "gaussian_mlp".into(),
            BaseModelKind::KnnQuantile { .. } => "knn".into(),
            BaseModelKind::Dqr { .. } => "dqr".into(),
        }
    }
}

/// Training controls shared by the SGD-based models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub seed: u64,
    pub max_epochs: usize,
    pub patience_updates: usize,
    pub batch_size: Option<usize>,
    pub holdout_fraction: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            seed: 0,
            max_epochs: 300,
            patience_updates: crate::neuralnet::DEFAULT_PATIENCE_UPDATES,
            batch_size: None,
            holdout_fraction: 0.1,
        }
    }
}

impl FitOptions {
    pub(crate) fn train_config(&self, learning_rate: f64, weight_decay: f64, tag: &str) -> TrainConfig {
        TrainConfig {
            learning_rate,
            weight_decay,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience_updates: self.patience_updates,
            seed: seed::derive_str(self.seed, tag),
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        FitOptions {
            seed,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FittedBaseModel {
    QuantileNet(QuantileNetModel),
    Gaussian(GaussianModel),
    Knn(KnnModel),
}

impl FittedBaseModel {
    /// Quantile predictions, one row per input row.
    pub fn predict(&self, x: &Mat) -> Result<Mat> {
        match self {
            FittedBaseModel::QuantileNet(m) => m.predict(x),
            FittedBaseModel::Gaussian(m) => m.predict(x),
            FittedBaseModel::Knn(m) => m.predict(x),
        }
    }

    pub fn grid(&self) -> &QuantileGrid {
        match self {
            FittedBaseModel::QuantileNet(m) => &m.grid,
            FittedBaseModel::Gaussian(m) => &m.grid,
            FittedBaseModel::Knn(m) => &m.grid,
        }
    }
}

/// Fits one base model on `(x, y)`.
pub fn fit(
    kind: &BaseModelKind,
    x: &Mat,
    y: &[f64],
    grid: &QuantileGrid,
    options: &FitOptions,
) -> Result<FittedBaseModel> {
    if x.rows != y.len() {
        return Err(Error::Shape(format!("{} rows but {} responses", x.rows, y.len())));
    }
    if x.rows == 0 {
        return Err(Error::Data("empty training set".into()));
    }
    if !x.is_finite() || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite training data".into()));
    }
    match kind {
        BaseModelKind::LinearPinball {
            weight_decay,
            learning_rate,
        } => {
            if x.rows < x.cols + 1 {
                return Err(Error::Data(format!(
                    "linear quantile regression needs n ≥ d+1 (n={}, d={})",
                    x.rows, x.cols
                )));
            }
            let cfg = options.train_config(*learning_rate, *weight_decay, "linear_pinball");
            quantile_net::fit(x, y, grid, &[], 0.0, None, &cfg, options.holdout_fraction)
                .map(FittedBaseModel::QuantileNet)
        }
        BaseModelKind::Dqr {
            hidden,
            dropout,
            crossing_weight,
            crossing_margin,
            learning_rate,
            weight_decay,
        } => {
            if hidden.is_empty() {
                return Err(Error::Config("DQR needs at least one hidden layer".into()));
            }
            let cfg = options.train_config(*learning_rate, *weight_decay, "dqr");
            quantile_net::fit(
                x,
                y,
                grid,
                hidden,
                *dropout,
                Some((*crossing_weight, *crossing_margin)),
                &cfg,
                options.holdout_fraction,
            )
            .map(FittedBaseModel::QuantileNet)
        }
        BaseModelKind::ConditionalGaussian {
            hidden,
            linear_log_sd,
            learning_rate,
        } => {
            let cfg = options.train_config(*learning_rate, 0.0, "gaussian");
            gaussian::fit(x, y, grid, hidden, *linear_log_sd, &cfg, options.holdout_fraction)
                .map(FittedBaseModel::Gaussian)
        }
        BaseModelKind::KnnQuantile { k } => knn::fit(x, y, grid, *k).map(FittedBaseModel::Knn),
    }
}

/// Seeded split of `0..n` into (fit, holdout) index lists.
pub(crate) fn holdout_split(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    use rand::seq::SliceRandom;
    if n < 2 {
        return Err(Error::Data(format!(
            "need at least 2 rows for an early-stopping holdout, got {n}"
        )));
    }
    let h = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed::derive_str(seed, "holdout")));
    let hold = idx.split_off(n - h);
    Ok((idx, hold))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_parse_from_toml() {
        let k: BaseModelKind = toml::from_str("kind = \"knn_quantile\"\nk = 7").unwrap();
        assert_eq!(k, BaseModelKind::knn(7));
        let d: BaseModelKind = toml::from_str("kind = \"dqr\"\nhidden = [64, 64]").unwrap();
        assert_eq!(d, BaseModelKind::dqr(&[64, 64]));
    }

    #[test]
    fn holdout_is_a_partition() {
        let (a, b) = holdout_split(50, 0.1, 3).unwrap();
        assert_eq!(b.len(), 5);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert!(holdout_split(1, 0.1, 0).is_err());
    }

    #[test]
    fn rejects_mismatched_or_non_finite_input() {
        let grid = QuantileGrid::even(3);
        let x = Mat::zeros(4, 1);
        assert!(fit(&BaseModelKind::knn(1), &x, &[1.0; 3], &grid, &FitOptions::default()).is_err());
        assert!(fit(
            &BaseModelKind::knn(1),
            &x,
            &[1.0, f64::NAN, 0.0, 0.0],
            &grid,
            &FitOptions::default()
        )
        .is_err());
    }
}
