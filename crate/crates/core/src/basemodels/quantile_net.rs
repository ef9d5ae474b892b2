//! Multi-level quantile heads trained on the summed pinball loss: the linear
//! model (no hidden layers) and DQR (MLP, crossing penalty, post sort).

use serde::{Deserialize, Serialize};

use super::net::Net;
use super::preprocess::{FeatureScaler, TargetScaler};
use crate::error::Result;
use crate::linalg::Mat;
use crate::neuralnet::{train_until_stop, NodeId, Objective, ParamSet, Tape, TrainConfig};
use crate::scoring::{self, QuantileGrid};
use crate::seed::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileNetModel {
    pub grid: QuantileGrid,
    pub features: FeatureScaler,
    pub target: TargetScaler,
    pub net: Net,
    pub params: ParamSet,
    pub post_sort: bool,
}

impl QuantileNetModel {
    pub fn predict(&self, x: &Mat) -> Result<Mat> {
        let z = self.features.transform(x)?;
        let mut q = self.net.predict(&self.params, &z);
        if self.post_sort {
            sort_rows(&mut q);
        }
        self.target.inverse_in_place(&mut q);
        Ok(q)
    }
}

pub(crate) fn sort_rows(q: &mut Mat) {
    let m = q.cols;
    for row in q.data.chunks_mut(m) {
        row.sort_by(f64::total_cmp);
    }
}

struct QuantileObjective<'a> {
    x: Mat,
    y: Vec<f64>,
    x_val: Mat,
    y_val: Vec<f64>,
    grid: &'a QuantileGrid,
    net: &'a Net,
    crossing: Option<(f64, Vec<f64>)>,
    sort_validation: bool,
}

impl Objective for QuantileObjective<'_> {
    fn train_len(&self) -> usize {
        self.y.len()
    }

    fn batch_loss(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        batch: &[usize],
        rng: &mut Rng,
    ) -> Result<NodeId> {
        let xb = tape.constant(self.x.select_rows(batch));
        let yb: Vec<f64> = batch.iter().map(|&i| self.y[i]).collect();
        let q = self.net.forward(tape, params, xb, Some(rng));
        let fit = tape.pinball_mean(q, &yb, self.grid.levels());
        Ok(match &self.crossing {
            Some((weight, margins)) if *weight > 0.0 => {
                let pen = tape.crossing_mean(q, margins);
                let pen = tape.scale(pen, *weight);
                tape.add(fit, pen)
            }
            _ => fit,
        })
    }

    fn validation_loss(&self, params: &ParamSet) -> Result<f64> {
        let mut q = self.net.predict(params, &self.x_val);
        if self.sort_validation {
            sort_rows(&mut q);
        }
        scoring::mean_wis_rows(self.grid, &q, &self.y_val)
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn fit(
    x: &Mat,
    y: &[f64],
    grid: &QuantileGrid,
    hidden: &[usize],
    dropout: f64,
    crossing: Option<(f64, f64)>,
    cfg: &TrainConfig,
    holdout_fraction: f64,
) -> Result<QuantileNetModel> {
    let features = FeatureScaler::fit(x)?;
    let target = TargetScaler::fit(y);
    let z = features.transform(x)?;
    let ys = target.forward(y);
    let (fit_idx, hold_idx) = super::holdout_split(y.len(), holdout_fraction, cfg.seed)?;

    let mut rng = seed::rng(seed::derive_str(cfg.seed, "init"));
    let mut params = ParamSet::default();
    let m = grid.len();
    let net = Net::init(features.output_width(), hidden, m, dropout, &mut params, &mut rng)?;
    // start every head at the unconditional quantile of the training response
    let y_fit: Vec<f64> = fit_idx.iter().map(|&i| ys[i]).collect();
    let mut sorted = y_fit.clone();
    sorted.sort_by(f64::total_cmp);
    let bias = &mut params.tensors[net.bias_index()].data;
    for (b, &t) in bias.iter_mut().zip(grid.levels()) {
        *b = scoring::empirical_quantile_sorted(&sorted, t);
    }

    let crossing = crossing.map(|(weight, margin)| {
        let mut table = vec![0.0; m * m];
        for t in 0..m {
            for u in t + 1..m {
                table[t * m + u] = margin;
            }
        }
        (weight, table)
    });
    let post_sort = crossing.is_some();
    let objective = QuantileObjective {
        x: z.select_rows(&fit_idx),
        y: y_fit,
        x_val: z.select_rows(&hold_idx),
        y_val: hold_idx.iter().map(|&i| ys[i]).collect(),
        grid,
        net: &net,
        crossing,
        sort_validation: post_sort,
    };
    let outcome = train_until_stop(&objective, params, cfg)?;
    Ok(QuantileNetModel {
        grid: grid.clone(),
        features,
        target,
        net,
        params: outcome.params,
        post_sort,
    })
}
