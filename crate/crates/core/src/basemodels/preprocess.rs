//! Feature and target scaling shared by the base models.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

const MIN_SD: f64 = 1e-12;

/// Per-column centering and scaling; zero-variance columns are dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub input_width: usize,
    pub kept: Vec<usize>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl FeatureScaler {
    pub fn fit(x: &Mat) -> Result<Self> {
        if x.rows == 0 {
            return Err(Error::Data("no rows to fit on".into()));
        }
        let n = x.rows as f64;
        let (mut kept, mut mean, mut sd) = (Vec::new(), Vec::new(), Vec::new());
        for j in 0..x.cols {
            let mu = x.iter_rows().map(|r| r[j]).sum::<f64>() / n;
            let var = x.iter_rows().map(|r| (r[j] - mu).powi(2)).sum::<f64>() / n;
            let s = var.sqrt();
            if s > MIN_SD {
                kept.push(j);
                mean.push(mu);
                sd.push(s);
            } else {
                log::warn!("feature column {j} has zero variance; dropping it");
            }
        }
        Ok(FeatureScaler {
            input_width: x.cols,
            kept,
            mean,
            sd,
        })
    }

    pub fn output_width(&self) -> usize {
        self.kept.len()
    }

    pub fn transform(&self, x: &Mat) -> Result<Mat> {
        if x.cols != self.input_width {
            return Err(Error::Shape(format!(
                "expected {} feature columns, got {}",
                self.input_width, x.cols
            )));
        }
        let mut out = Mat::zeros(x.rows, self.kept.len());
        for i in 0..x.rows {
            let src = x.row(i);
            for (k, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = (src[self.kept[k]] - self.mean[k]) / self.sd[k];
            }
        }
        Ok(out)
    }
}

/// Affine map of the response onto a zero-mean, unit-sd scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub mean: f64,
    pub sd: f64,
}

impl TargetScaler {
    pub fn fit(y: &[f64]) -> Self {
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        TargetScaler {
            mean,
            sd: if sd > MIN_SD { sd } else { 1.0 },
        }
    }

    pub fn forward(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.mean) / self.sd).collect()
    }

    pub fn inverse_in_place(&self, q: &mut Mat) {
        for v in &mut q.data {
            *v = *v * self.sd + self.mean;
        }
    }
}
