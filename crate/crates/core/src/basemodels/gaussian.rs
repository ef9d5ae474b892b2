//! Conditional Gaussian regression: quantiles `μ(x) + σ(x) Φ⁻¹(τ)`.

use serde::{Deserialize, Serialize};

use super::net::Net;
use super::preprocess::{FeatureScaler, TargetScaler};
use crate::distlab::Gaussian;
use crate::error::Result;
use crate::linalg::Mat;
use crate::neuralnet::{train_until_stop, NodeId, Objective, ParamSet, Tape, TrainConfig};
use crate::scoring::{self, QuantileGrid};
use crate::seed::{self, Rng};

pub const SD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LogSd {
    Constant(usize),
    Linear { weight: usize, bias: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianModel {
    pub grid: QuantileGrid,
    pub features: FeatureScaler,
    pub target: TargetScaler,
    pub mean: Net,
    pub log_sd: LogSd,
    pub params: ParamSet,
    /// Standard normal quantiles at the grid levels.
    pub z: Vec<f64>,
}

impl GaussianModel {
    /// Conditional mean and standard deviation in response units.
    pub fn mean_sd(&self, x: &Mat) -> Result<(Vec<f64>, Vec<f64>)> {
        let z = self.features.transform(x)?;
        let (mu, ls) = standardized_mean_log_sd(&self.mean, &self.log_sd, &self.params, &z);
        let mut floored = 0usize;
        let sd: Vec<f64> = ls
            .iter()
            .map(|l| {
                let s = l.exp() * self.target.sd;
                if s < SD_FLOOR || !s.is_finite() {
                    floored += 1;
                    SD_FLOOR
                } else {
                    s
                }
            })
            .collect();
        if floored > 0 {
            log::warn!("conditional sd floored at {SD_FLOOR} for {floored} rows");
        }
        let mean = mu.iter().map(|m| self.target.mean + self.target.sd * m).collect();
        Ok((mean, sd))
    }

    pub fn predict(&self, x: &Mat) -> Result<Mat> {
        let (mu, sd) = self.mean_sd(x)?;
        let m = self.z.len();
        let mut out = Mat::zeros(x.rows, m);
        for i in 0..x.rows {
            for (o, zt) in out.row_mut(i).iter_mut().zip(&self.z) {
                *o = mu[i] + sd[i] * zt;
            }
        }
        Ok(out)
    }
}

fn standardized_mean_log_sd(mean: &Net, log_sd: &LogSd, params: &ParamSet, z: &Mat) -> (Vec<f64>, Vec<f64>) {
    let mu = mean.predict(params, z).data;
    let ls = match log_sd {
        LogSd::Constant(c) => vec![params.tensors[*c].data[0]; z.rows],
        LogSd::Linear { weight, bias } => Net::Linear {
            weight: *weight,
            bias: *bias,
        }
        .predict(params, z)
        .data,
    };
    (mu, ls)
}

struct NllObjective<'a> {
    x: Mat,
    y: Vec<f64>,
    x_val: Mat,
    y_val: Vec<f64>,
    grid: &'a QuantileGrid,
    z: &'a [f64],
    mean: &'a Net,
    log_sd: &'a LogSd,
}

impl Objective for NllObjective<'_> {
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
        let mu = self.mean.forward(tape, params, xb, Some(rng));
        let ls = match self.log_sd {
            LogSd::Constant(c) => {
                let zeros = tape.constant(Mat::zeros(batch.len(), 1));
                let c = tape.param(params, *c);
                tape.add_row(zeros, c)
            }
            LogSd::Linear { weight, bias } => {
                let w = tape.param(params, *weight);
                let b = tape.param(params, *bias);
                tape.affine(xb, w, b)
            }
        };
        let both = tape.hcat(mu, ls);
        Ok(tape.gaussian_nll_mean(both, &yb))
    }

    fn validation_loss(&self, params: &ParamSet) -> Result<f64> {
        let (mu, ls) = standardized_mean_log_sd(self.mean, self.log_sd, params, &self.x_val);
        let m = self.z.len();
        let mut q = Mat::zeros(mu.len(), m);
        for i in 0..mu.len() {
            let s = ls[i].exp();
            for (o, zt) in q.row_mut(i).iter_mut().zip(self.z) {
                *o = mu[i] + s * zt;
            }
        }
        scoring::mean_wis_rows(self.grid, &q, &self.y_val)
    }
}

pub(crate) fn fit(
    x: &Mat,
    y: &[f64],
    grid: &QuantileGrid,
    hidden: &[usize],
    linear_log_sd: bool,
    cfg: &TrainConfig,
    holdout_fraction: f64,
) -> Result<GaussianModel> {
    let features = FeatureScaler::fit(x)?;
    let target = TargetScaler::fit(y);
    let zx = features.transform(x)?;
    let ys = target.forward(y);
    let (fit_idx, hold_idx) = super::holdout_split(y.len(), holdout_fraction, cfg.seed)?;

    let mut rng = seed::rng(seed::derive_str(cfg.seed, "init"));
    let mut params = ParamSet::default();
    let d = features.output_width();
    let mean = Net::init(d, hidden, 1, 0.0, &mut params, &mut rng)?;
    let log_sd = if linear_log_sd {
        LogSd::Linear {
            weight: params.push(Mat::zeros(d, 1)),
            bias: params.push(Mat::zeros(1, 1)),
        }
    } else {
        LogSd::Constant(params.push(Mat::zeros(1, 1)))
    };
    let std_normal = Gaussian::new(0.0, 1.0)?;
    let z: Vec<f64> = grid.levels().iter().map(|&t| std_normal.quantile(t)).collect();

    let objective = NllObjective {
        x: zx.select_rows(&fit_idx),
        y: fit_idx.iter().map(|&i| ys[i]).collect(),
        x_val: zx.select_rows(&hold_idx),
        y_val: hold_idx.iter().map(|&i| ys[i]).collect(),
        grid,
        z: &z,
        mean: &mean,
        log_sd: &log_sd,
    };
    let outcome = train_until_stop(&objective, params, cfg)?;
    Ok(GaussianModel {
        grid: grid.clone(),
        features,
        target,
        mean,
        log_sd,
        params: outcome.params,
        z,
    })
}
