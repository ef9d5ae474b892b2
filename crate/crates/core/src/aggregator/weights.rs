//! Simplex weight sets, the crossing penalty and its margin table.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::neuralnet::{mix_weights, Resolution};
use crate::scoring::{empirical_quantile_sorted, QuantileGrid};

pub const SIMPLEX_TOL: f64 = 1e-9;

/// A concrete set of aggregation weights for one input (or for all inputs,
/// when global). Layouts: coarse `[j]`, medium `[τ][j]`, fine `[τ][j][ν]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSpec {
    pub resolution: Resolution,
    pub p: usize,
    pub m: usize,
    pub weights: Vec<f64>,
}

impl WeightSpec {
    pub fn new(resolution: Resolution, p: usize, m: usize, weights: Vec<f64>) -> Result<Self> {
        let spec = WeightSpec {
            resolution,
            p,
            m,
            weights,
        };
        spec.check_simplex()?;
        Ok(spec)
    }

    pub fn uniform(resolution: Resolution, p: usize, m: usize) -> Self {
        let g = resolution.group_size(p, m);
        WeightSpec {
            resolution,
            p,
            m,
            weights: vec![1.0 / g as f64; resolution.weight_count(p, m)],
        }
    }

    /// Every group is nonnegative and sums to one within [`SIMPLEX_TOL`].
    pub fn check_simplex(&self) -> Result<()> {
        let count = self.resolution.weight_count(self.p, self.m);
        if self.weights.len() != count {
            return Err(Error::Shape(format!(
                "{} weights for a {} spec with p={}, m={}",
                self.weights.len(),
                self.resolution.name(),
                self.p,
                self.m
            )));
        }
        for (g, group) in self
            .weights
            .chunks(self.resolution.group_size(self.p, self.m))
            .enumerate()
        {
            let sum: f64 = group.iter().sum();
            if group.iter().any(|&w| w < -SIMPLEX_TOL) || (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::Contract(format!(
                    "weight group {g} is off the simplex (sum {sum})"
                )));
            }
        }
        Ok(())
    }

    /// The equivalent fine weights: a coarse weight `w_j` becomes `w_j` on
    /// every diagonal entry `ν = τ`, a medium weight `w_j^τ` likewise.
    pub fn to_fine(&self) -> WeightSpec {
        let (p, m) = (self.p, self.m);
        let mut fine = vec![0.0; p * m * m];
        for t in 0..m {
            for j in 0..p {
                let w = match self.resolution {
                    Resolution::Coarse => self.weights[j],
                    Resolution::Medium => self.weights[t * p + j],
                    Resolution::Fine => return self.clone(),
                };
                fine[t * p * m + j * m + t] = w;
            }
        }
        WeightSpec {
            resolution: Resolution::Fine,
            p,
            m,
            weights: fine,
        }
    }
}

/// Combines a `p×m` matrix of base predictions (row `j` = model `j`).
pub fn apply_weights(spec: &WeightSpec, base_preds: &Mat) -> Result<Vec<f64>> {
    spec.check_simplex()?;
    if base_preds.shape() != (spec.p, spec.m) {
        return Err(Error::Shape(format!(
            "base predictions are {:?}, expected ({}, {})",
            base_preds.shape(),
            spec.p,
            spec.m
        )));
    }
    let mut out = vec![0.0; spec.m];
    mix_weights(
        spec.resolution,
        spec.p,
        spec.m,
        &spec.weights,
        &base_preds.data,
        &mut out,
    );
    Ok(out)
}

/// Buffers `δ_{ττ'}` for `τ < τ'` stored row-major as an `m×m` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginTable {
    pub m: usize,
    pub delta: Vec<f64>,
}

impl MarginTable {
    pub fn zeros(m: usize) -> Self {
        MarginTable {
            m,
            delta: vec![0.0; m * m],
        }
    }

    pub fn constant(m: usize, delta: f64) -> Result<Self> {
        if !(delta >= 0.0) {
            return Err(Error::Domain(format!("margin {delta} must be nonnegative")));
        }
        let mut t = Self::zeros(m);
        for a in 0..m {
            for b in a + 1..m {
                t.delta[a * m + b] = delta;
            }
        }
        Ok(t)
    }

    pub fn get(&self, lower: usize, upper: usize) -> f64 {
        self.delta[lower * self.m + upper]
    }
}

/// `δ_{ττ'} = δ₀ (Q_τ'(R) − Q_τ(R))₊` with lower `⌈τn⌉` empirical quantiles.
pub fn adaptive_margins(residuals: &[f64], grid: &QuantileGrid, delta0: f64) -> Result<MarginTable> {
    if residuals.is_empty() {
        return Err(Error::Data("adaptive margins need at least one residual".into()));
    }
    if !(delta0 >= 0.0) {
        return Err(Error::Domain(format!("δ₀ = {delta0} must be nonnegative")));
    }
    let mut sorted = residuals.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q: Vec<f64> = grid
        .levels()
        .iter()
        .map(|&t| empirical_quantile_sorted(&sorted, t))
        .collect();
    let m = grid.len();
    let mut table = MarginTable::zeros(m);
    for a in 0..m {
        for b in a + 1..m {
            table.delta[a * m + b] = delta0 * (q[b] - q[a]).max(0.0);
        }
    }
    Ok(table)
}

/// `Σ_x Σ_{τ<τ'} (g(x;τ) − g(x;τ') + δ_{ττ'})₊` over the rows of `preds`.
pub fn crossing_penalty(preds: &Mat, margins: &MarginTable) -> Result<f64> {
    if preds.cols != margins.m {
        return Err(Error::Shape(format!(
            "{} levels but a margin table for {}",
            preds.cols, margins.m
        )));
    }
    let m = margins.m;
    let mut total = 0.0;
    for row in preds.iter_rows() {
        for a in 0..m {
            for b in a + 1..m {
                total += (row[a] - row[b] + margins.get(a, b)).max(0.0);
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn base() -> Mat {
        Mat::from_rows(&[vec![0.0, 1.0, 2.0], vec![1.0, 3.0, 4.0]]).unwrap()
    }

    #[test]
    fn single_model_fine_identity() {
        let p = Mat::from_rows(&[vec![-1.0, 0.5, 2.5]]).unwrap();
        let mut w = vec![0.0; 9];
        for t in 0..3 {
            w[t * 3 + t] = 1.0;
        }
        let spec = WeightSpec::new(Resolution::Fine, 1, 3, w).unwrap();
        assert_eq!(apply_weights(&spec, &p).unwrap(), p.data);
    }

    #[test]
    fn uniform_coarse_is_the_average() {
        let out = apply_weights(&WeightSpec::uniform(Resolution::Coarse, 2, 3), &base()).unwrap();
        assert_eq!(out, vec![0.5, 2.0, 3.0]);
    }

    #[test]
    fn simplex_violation_is_rejected() {
        let spec = WeightSpec {
            resolution: Resolution::Coarse,
            p: 2,
            m: 3,
            weights: vec![0.7, 0.4],
        };
        assert!(matches!(apply_weights(&spec, &base()), Err(Error::Contract(_))));
        assert!(WeightSpec::new(Resolution::Coarse, 2, 3, vec![1.2, -0.2]).is_err());
    }

    fn random_simplex_groups(rng: &mut crate::seed::Rng, groups: usize, size: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for _ in 0..groups {
            let raw: Vec<f64> = (0..size).map(|_| rng.random::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            out.extend(raw.iter().map(|r| r / s));
        }
        out
    }

    #[test]
    fn range_containment_and_embedding() {
        let mut rng = crate::seed::rng(4);
        let (p, m) = (3, 4);
        for _ in 0..500 {
            let preds = Mat {
                rows: p,
                cols: m,
                data: (0..p * m).map(|_| rng.random_range(-5.0..5.0)).collect(),
            };
            for res in [Resolution::Coarse, Resolution::Medium, Resolution::Fine] {
                let groups = if res == Resolution::Coarse { 1 } else { m };
                let w = random_simplex_groups(&mut rng, groups, res.group_size(p, m));
                let spec = WeightSpec::new(res, p, m, w).unwrap();
                let out = apply_weights(&spec, &preds).unwrap();
                for (t, &o) in out.iter().enumerate() {
                    let (lo, hi) = if res == Resolution::Fine {
                        preds.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, &v| (a.0.min(v), a.1.max(v)))
                    } else {
                        (0..p).map(|j| preds.get(j, t)).fold((f64::INFINITY, f64::NEG_INFINITY), |a, v| (a.0.min(v), a.1.max(v)))
                    };
                    assert!(lo - 1e-12 <= o && o <= hi + 1e-12);
                }
                let fine = spec.to_fine();
                fine.check_simplex().unwrap();
                let via_fine = apply_weights(&fine, &preds).unwrap();
                for (a, b) in out.iter().zip(&via_fine) {
                    assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn penalty_examples() {
        let mono = Mat::from_rows(&[vec![0.0, 1.0, 2.0]]).unwrap();
        assert_eq!(crossing_penalty(&mono, &MarginTable::zeros(3)).unwrap(), 0.0);
        let crossed = Mat::from_rows(&[vec![2.0, 1.0]]).unwrap();
        assert_eq!(crossing_penalty(&crossed, &MarginTable::zeros(2)).unwrap(), 1.0);
        let close = Mat::from_rows(&[vec![1.0, 1.2]]).unwrap();
        let pen = crossing_penalty(&close, &MarginTable::constant(2, 0.5).unwrap()).unwrap();
        assert!((pen - 0.3).abs() < 1e-12);
    }

    #[test]
    fn margin_examples() {
        let grid = QuantileGrid::new(vec![0.2, 0.8]).unwrap();
        let r = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(adaptive_margins(&r, &grid, 1.0).unwrap().get(0, 1), 3.0);
        let zero = adaptive_margins(&r, &grid, 0.0).unwrap();
        assert!(zero.delta.iter().all(|&d| d == 0.0));
        let flat = adaptive_margins(&[2.0; 7], &QuantileGrid::even(5), 0.1).unwrap();
        assert!(flat.delta.iter().all(|&d| d == 0.0));
        assert!(adaptive_margins(&[], &grid, 1.0).is_err());
    }
}
