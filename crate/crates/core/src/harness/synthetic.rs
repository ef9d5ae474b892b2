//! Synthetic regression problems with known conditional distributions.

use rand::Rng;
use rand_distr::{Distribution, Normal, StudentT};
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use crate::distlab::Gaussian;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// `y = xᵀβ + N(0, 0.5²)`.
    LinearGaussian,
    /// Nonlinear mean with noise sd growing in `|x₀|`.
    Heteroskedastic,
    /// Linear with small noise for `x₀ < 0`; oscillating mean with wide,
    /// right-skewed noise for `x₀ ≥ 0`.
    TwoRegime,
    /// Linear mean with Student-t (3 d.o.f.) noise.
    HeavyTailed,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "linear_gaussian" => Ok(SyntheticKind::LinearGaussian),
            "heteroskedastic" => Ok(SyntheticKind::Heteroskedastic),
            "two_regime" => Ok(SyntheticKind::TwoRegime),
            "heavy_tailed" => Ok(SyntheticKind::HeavyTailed),
            other => Err(Error::Config(format!("unknown synthetic dataset `{other}`"))),
        }
    }
}

impl SyntheticKind {
    pub fn name(self) -> &'static str {
        match self {
            SyntheticKind::LinearGaussian => "linear_gaussian",
            SyntheticKind::Heteroskedastic => "heteroskedastic",
            SyntheticKind::TwoRegime => "two_regime",
            SyntheticKind::HeavyTailed => "heavy_tailed",
        }
    }
}

fn beta(j: usize) -> f64 {
    // 1, −0.5, 0.25, …
    (-0.5f64).powi(j as i32)
}

fn linear_part(x: &[f64]) -> f64 {
    x.iter().enumerate().map(|(j, v)| beta(j) * v).sum()
}

/// Draws `n` rows with `d` features uniform on `[−1, 1]`.
pub fn generate(kind: SyntheticKind, n: usize, d: usize, seed_value: u64) -> Result<Dataset> {
    if d < 2 {
        return Err(Error::Config("synthetic generators need at least 2 features".into()));
    }
    let mut rng = seed::rng(seed::derive_str(seed_value, kind.name()));
    let std = Normal::new(0.0, 1.0).unwrap();
    let t3 = StudentT::new(3.0).unwrap();
    let mut x = Mat::zeros(n, d);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row_mut(i);
        for v in row.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let r = &*row;
        let value = match kind {
            SyntheticKind::LinearGaussian => linear_part(r) + 0.5 * std.sample(&mut rng),
            SyntheticKind::Heteroskedastic => {
                (2.0 * r[0]).sin() + 0.5 * r[1] + (0.1 + 0.9 * r[0].abs()) * std.sample(&mut rng)
            }
            SyntheticKind::TwoRegime => {
                if r[0] < 0.0 {
                    linear_part(r) + 0.2 * std.sample(&mut rng)
                } else {
                    // exponential noise, shifted so its median sits on the mean curve
                    let e: f64 = -(1.0 - rng.random::<f64>()).ln();
                    1.5 * (4.0 * r[1]).sin() + 0.8 * (e - std::f64::consts::LN_2)
                }
            }
            SyntheticKind::HeavyTailed => linear_part(r) + 0.5 * t3.sample(&mut rng),
        };
        y.push(value);
    }
    let columns = (0..d).map(|j| format!("x{j}")).collect();
    Dataset::new(kind.name(), columns, "y", x, y)
}

/// True conditional quantiles where they have a closed form.
pub fn true_quantiles(kind: SyntheticKind, x: &Mat, levels: &[f64]) -> Result<Mat> {
    let mut q = Mat::zeros(x.rows, levels.len());
    for i in 0..x.rows {
        let r = x.row(i);
        for (o, &t) in q.row_mut(i).iter_mut().zip(levels) {
            *o = match kind {
                SyntheticKind::LinearGaussian => Gaussian::new(linear_part(r), 0.5)?.quantile(t),
                SyntheticKind::Heteroskedastic => {
                    Gaussian::new((2.0 * r[0]).sin() + 0.5 * r[1], 0.1 + 0.9 * r[0].abs())?.quantile(t)
                }
                SyntheticKind::TwoRegime => {
                    if r[0] < 0.0 {
                        Gaussian::new(linear_part(r), 0.2)?.quantile(t)
                    } else {
                        let e = -(1.0 - t).ln();
                        1.5 * (4.0 * r[1]).sin() + 0.8 * (e - std::f64::consts::LN_2)
                    }
                }
                SyntheticKind::HeavyTailed => {
                    return Err(Error::Config("no closed-form quantiles for heavy-tailed data".into()))
                }
            };
        }
    }
    Ok(q)
}
