use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Levels closer than this are considered equal when matching `α/2` and
/// `1 − α/2` against the grid.
pub const LEVEL_TOL: f64 = 1e-9;

/// A strictly increasing set of quantile levels in (0, 1).
///
/// Symmetry around 0.5 is not required at construction; operations that need
/// it (interval scores, coverage, conformal adjustments) check it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct QuantileGrid {
    levels: Vec<f64>,
}

impl TryFrom<Vec<f64>> for QuantileGrid {
    type Error = Error;

    fn try_from(levels: Vec<f64>) -> Result<Self> {
        QuantileGrid::new(levels)
    }
}

impl From<QuantileGrid> for Vec<f64> {
    fn from(g: QuantileGrid) -> Self {
        g.levels
    }
}

impl QuantileGrid {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Domain("quantile grid is empty".into()));
        }
        for &t in &levels {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Domain(format!("level {t} is outside (0, 1)")));
            }
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain("levels must be strictly increasing".into()));
        }
        Ok(QuantileGrid { levels })
    }

    /// A grid that must also be symmetric around 0.5.
    pub fn symmetric(levels: Vec<f64>) -> Result<Self> {
        let g = Self::new(levels)?;
        if !g.is_symmetric() {
            return Err(Error::Contract("grid is not symmetric around 0.5".into()));
        }
        Ok(g)
    }

    /// `m` evenly spaced levels `i / (m + 1)`, e.g. `m = 99` gives 0.01, …, 0.99.
    pub fn even(m: usize) -> Self {
        let levels = (1..=m).map(|i| i as f64 / (m + 1) as f64).collect();
        QuantileGrid { levels }
    }

    /// Central-interval grid built from exclusion probabilities: `{α/2, 1−α/2}`.
    pub fn from_alphas(alphas: &[f64]) -> Result<Self> {
        let mut levels = Vec::with_capacity(2 * alphas.len());
        for &a in alphas {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::Domain(format!("alpha {a} is outside (0, 1]")));
            }
            levels.push(a / 2.0);
            if a < 1.0 {
                levels.push(1.0 - a / 2.0);
            }
        }
        levels.sort_by(f64::total_cmp);
        levels.dedup_by(|a, b| (*a - *b).abs() < LEVEL_TOL);
        Self::new(levels)
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn is_symmetric(&self) -> bool {
        let m = self.levels.len();
        (0..m).all(|i| (self.levels[i] + self.levels[m - 1 - i] - 1.0).abs() < LEVEL_TOL)
    }

    pub fn is_evenly_spaced(&self) -> bool {
        if self.levels.len() < 2 {
            return true;
        }
        let d = self.levels[1] - self.levels[0];
        self.levels
            .windows(2)
            .all(|w| ((w[1] - w[0]) - d).abs() < 1e-9)
    }

    pub fn index_of(&self, level: f64) -> Option<usize> {
        self.levels
            .iter()
            .position(|&t| (t - level).abs() < LEVEL_TOL)
    }

    pub fn has_median(&self) -> bool {
        self.median_index().is_some()
    }

    pub fn median_index(&self) -> Option<usize> {
        self.index_of(0.5)
    }

    /// Index used as the starting point of the min-max sweep: the median when
    /// present, otherwise the smallest level above 0.5 (the last level if none).
    pub fn anchor_index(&self) -> usize {
        self.levels
            .iter()
            .position(|&t| t >= 0.5 - LEVEL_TOL)
            .unwrap_or(self.levels.len() - 1)
    }

    /// Exclusion probabilities `{2τ : τ < 0.5}` in increasing order, with
    /// `α = 1` appended when the grid contains the median.
    pub fn alphas(&self) -> Vec<f64> {
        let mut a: Vec<f64> = self
            .levels
            .iter()
            .filter(|&&t| t < 0.5 - LEVEL_TOL)
            .map(|&t| 2.0 * t)
            .collect();
        if self.has_median() {
            a.push(1.0);
        }
        a
    }

    /// Indices `(lower, upper)` of the levels `α/2` and `1 − α/2`.
    pub fn interval_indices(&self, alpha: f64) -> Result<(usize, usize)> {
        let lo = self.index_of(alpha / 2.0);
        let hi = self.index_of(1.0 - alpha / 2.0);
        match (lo, hi) {
            (Some(l), Some(h)) => Ok((l, h)),
            _ => Err(Error::Domain(format!(
                "alpha {alpha} does not correspond to a central interval of the grid"
            ))),
        }
    }

    pub fn check_len(&self, len: usize) -> Result<()> {
        if len != self.levels.len() {
            return Err(Error::Shape(format!(
                "quantile vector has {len} entries but the grid has {} levels",
                self.levels.len()
            )));
        }
        Ok(())
    }
}
