//! Nearest-neighbour empirical quantiles.

use serde::{Deserialize, Serialize};

use super::preprocess::FeatureScaler;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scoring::{empirical_quantile_sorted, QuantileGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    pub grid: QuantileGrid,
    pub k: usize,
    pub features: FeatureScaler,
    /// Standardized training features.
    pub x: Mat,
    pub y: Vec<f64>,
}

pub(crate) fn fit(x: &Mat, y: &[f64], grid: &QuantileGrid, k: usize) -> Result<KnnModel> {
    if k == 0 || k > y.len() {
        return Err(Error::Config(format!(
            "k = {k} must lie in 1..={} (training size)",
            y.len()
        )));
    }
    let features = FeatureScaler::fit(x)?;
    Ok(KnnModel {
        grid: grid.clone(),
        k,
        x: features.transform(x)?,
        features,
        y: y.to_vec(),
    })
}

impl KnnModel {
    /// Neighbours are ranked by Euclidean distance, ties by training index.
    pub fn predict(&self, x: &Mat) -> Result<Mat> {
        let z = self.features.transform(x)?;
        let n = self.y.len();
        let mut out = Mat::zeros(z.rows, self.grid.len());
        let mut ranked: Vec<(f64, usize)> = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(self.k);
        for i in 0..z.rows {
            let q = z.row(i);
            ranked.clear();
            ranked.extend(self.x.iter_rows().enumerate().map(|(t, r)| {
                let d: f64 = r.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                (d, t)
            }));
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if self.k < n {
                ranked.select_nth_unstable_by(self.k - 1, cmp);
            }
            ys.clear();
            ys.extend(ranked[..self.k].iter().map(|&(_, t)| self.y[t]));
            ys.sort_by(f64::total_cmp);
            for (o, &t) in out.row_mut(i).iter_mut().zip(self.grid.levels()) {
                *o = empirical_quantile_sorted(&ys, t);
            }
        }
        Ok(out)
    }
}
