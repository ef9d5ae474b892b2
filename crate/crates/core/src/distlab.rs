//! Numerical laboratory comparing probability averaging (mixtures of CDFs)
//! with quantile averaging (Vincentization) of continuous distributions.
//!
//! Distributions are represented by their quantile function sampled on a
//! dense level grid, together with the density at each sampled quantile.
//! The CDF at `v = Q(u)` is `u` by construction, so the sampled quantiles
//! double as the value grid for the CDF.

use std::io::Write;

use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Number of levels on the default grid.
pub const GRID_POINTS: usize = 10_000;
/// The level grid is clipped to `[EDGE, 1 − EDGE]`.
pub const EDGE: f64 = 1e-4;

/// A Gaussian component `N(mean, sd²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub mean: f64,
    pub sd: f64,
}

impl Gaussian {
    pub fn new(mean: f64, sd: f64) -> Result<Self> {
        if !(sd > 0.0 && sd.is_finite() && mean.is_finite()) {
            return Err(Error::Domain(format!("invalid Gaussian N({mean}, {sd}²)")));
        }
        Ok(Gaussian { mean, sd })
    }

    fn std_normal() -> Normal {
        Normal::new(0.0, 1.0).expect("standard normal")
    }

    pub fn cdf(&self, v: f64) -> f64 {
        Self::std_normal().cdf((v - self.mean) / self.sd)
    }

    pub fn pdf(&self, v: f64) -> f64 {
        Self::std_normal().pdf((v - self.mean) / self.sd) / self.sd
    }

    pub fn quantile(&self, u: f64) -> f64 {
        self.mean + self.sd * Self::std_normal().inverse_cdf(u)
    }

    /// Quantile at level `1 − s`, accurate for `s` far below machine epsilon.
    pub fn upper_quantile(&self, s: f64) -> f64 {
        self.mean - self.sd * Self::std_normal().inverse_cdf(s)
    }
}

/// Quantile function sampled on a level grid, with matching densities.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericDistribution {
    /// Increasing levels in (0, 1).
    pub u: Vec<f64>,
    /// `Q(u)`, nondecreasing.
    pub quantiles: Vec<f64>,
    /// `f(Q(u))`; empty for distributions without a density (point masses).
    pub density: Vec<f64>,
}

/// The default level grid: [`GRID_POINTS`] even points on `[EDGE, 1 − EDGE]`.
pub fn level_grid() -> Vec<f64> {
    let n = GRID_POINTS;
    let step = (1.0 - 2.0 * EDGE) / (n - 1) as f64;
    (0..n).map(|i| EDGE + i as f64 * step).collect()
}

impl NumericDistribution {
    pub fn from_gaussian(g: Gaussian) -> Self {
        let u = level_grid();
        let quantiles: Vec<f64> = u.iter().map(|&t| g.quantile(t)).collect();
        let density = quantiles.iter().map(|&v| g.pdf(v)).collect();
        NumericDistribution {
            u,
            quantiles,
            density,
        }
    }

    pub fn point_mass(c: f64) -> Self {
        let u = level_grid();
        let quantiles = vec![c; u.len()];
        NumericDistribution {
            u,
            quantiles,
            density: Vec::new(),
        }
    }

    /// CDF by linear interpolation of the inverse of the sampled quantiles.
    pub fn cdf_at(&self, v: f64) -> f64 {
        let q = &self.quantiles;
        if v < q[0] {
            return 0.0;
        }
        if v >= q[q.len() - 1] {
            return 1.0;
        }
        let k = q.partition_point(|&x| x <= v);
        let (a, b) = (q[k - 1], q[k]);
        let (ua, ub) = (self.u[k - 1], self.u[k]);
        if b == a {
            ub
        } else {
            ua + (ub - ua) * (v - a) / (b - a)
        }
    }

    /// Density by linear interpolation between sampled quantiles; zero outside
    /// the sampled range.
    pub fn density_at(&self, v: f64) -> f64 {
        let q = &self.quantiles;
        if self.density.is_empty() || v < q[0] || v > q[q.len() - 1] {
            return 0.0;
        }
        let k = q.partition_point(|&x| x <= v).clamp(1, q.len() - 1);
        let (a, b) = (q[k - 1], q[k]);
        if b == a {
            return self.density[k];
        }
        let t = (v - a) / (b - a);
        self.density[k - 1] * (1.0 - t) + self.density[k] * t
    }
}

fn check_simplex(n: usize, weights: &[f64]) -> Result<()> {
    if n == 0 || weights.len() != n {
        return Err(Error::Shape(format!(
            "{} weights for {n} distributions",
            weights.len()
        )));
    }
    if weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::Contract("weights must be nonnegative".into()));
    }
    let s: f64 = weights.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(Error::Contract(format!("weights sum to {s}, not 1")));
    }
    Ok(())
}

fn mixture_cdf(dists: &[Gaussian], w: &[f64], v: f64) -> f64 {
    dists.iter().zip(w).map(|(d, &wj)| wj * d.cdf(v)).sum()
}

fn mixture_pdf(dists: &[Gaussian], w: &[f64], v: f64) -> f64 {
    dists.iter().zip(w).map(|(d, &wj)| wj * d.pdf(v)).sum()
}

/// Solves `F(x) = u` for the mixture CDF by safeguarded Newton iteration.
fn invert_mixture(dists: &[Gaussian], w: &[f64], u: f64) -> f64 {
    let mut lo = dists
        .iter()
        .map(|d| d.quantile(u))
        .fold(f64::INFINITY, f64::min);
    let mut hi = dists
        .iter()
        .map(|d| d.quantile(u))
        .fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return lo;
    }
    let mut x: f64 = dists.iter().zip(w).map(|(d, &wj)| wj * d.quantile(u)).sum();
    for _ in 0..100 {
        let f = mixture_cdf(dists, w, x) - u;
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let d = mixture_pdf(dists, w, x);
        let mut next = x - f / d;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-15 * (1.0 + x.abs()) || hi - lo <= 1e-15 * (1.0 + x.abs()) {
            return next;
        }
        x = next;
    }
    x
}

/// Probability average `F = Σ w_j F_j`; its quantile function is obtained by
/// numerically inverting the mixture CDF.
pub fn probability_average(dists: &[Gaussian], weights: &[f64]) -> Result<NumericDistribution> {
    check_simplex(dists.len(), weights)?;
    let u = level_grid();
    let quantiles: Vec<f64> = u.iter().map(|&t| invert_mixture(dists, weights, t)).collect();
    let density = quantiles
        .iter()
        .map(|&v| mixture_pdf(dists, weights, v))
        .collect();
    Ok(NumericDistribution {
        u,
        quantiles,
        density,
    })
}

/// Quantile average `Q̄ = Σ w_j Q_j`. The density uses `f̄(Q̄(u)) = 1 / q̄(u)`
/// with `q̄` from centered differences of `Q̄`.
pub fn quantile_average(dists: &[Gaussian], weights: &[f64]) -> Result<NumericDistribution> {
    check_simplex(dists.len(), weights)?;
    let u = level_grid();
    let quantiles: Vec<f64> = u
        .iter()
        .map(|&t| {
            dists
                .iter()
                .zip(weights)
                .map(|(d, &wj)| wj * d.quantile(t))
                .sum()
        })
        .collect();
    let density = reciprocal_density(&u, &quantiles);
    Ok(NumericDistribution {
        u,
        quantiles,
        density,
    })
}

fn reciprocal_density(u: &[f64], q: &[f64]) -> Vec<f64> {
    let n = u.len();
    (0..n)
        .map(|i| {
            let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
            let slope = (q[b] - q[a]) / (u[b] - u[a]);
            if slope > 0.0 {
                1.0 / slope
            } else {
                f64::INFINITY
            }
        })
        .collect()
}

/// Uncentered moment `∫₀¹ Q(u)^k du` by the trapezoid rule on the level
/// grid, with the two clipped end pieces closed by rectangles.
pub fn moment(dist: &NumericDistribution, k: u32) -> Result<f64> {
    if k == 0 {
        return Err(Error::Domain("moment order must be at least 1".into()));
    }
    let (u, q) = (&dist.u, &dist.quantiles);
    let n = u.len();
    let pow = |x: f64| x.powi(k as i32);
    let mut total = u[0] * pow(q[0]) + (1.0 - u[n - 1]) * pow(q[n - 1]);
    for i in 1..n {
        total += 0.5 * (u[i] - u[i - 1]) * (pow(q[i]) + pow(q[i - 1]));
    }
    Ok(total)
}

/// One row of a tail-ratio profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailRow {
    pub v: f64,
    /// `f(v) / f₁(v)` for the probability average.
    pub prob_ratio: f64,
    /// `f̄(v) / f₁(v)` for the quantile average.
    pub quant_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TailProfile {
    pub rows: Vec<TailRow>,
    /// Grid points dropped because a density underflowed.
    pub omitted: Vec<f64>,
}

/// Level `u` (given as `(s, upper)`: `u = 1 − s` when `upper`, else `u = s`)
/// at which `Σ w_j Q_j(u) = v`, found by bisection on `ln s`.
fn solve_level(dists: &[Gaussian], w: &[f64], v: f64) -> (f64, bool) {
    let qbar_med: f64 = dists.iter().zip(w).map(|(d, &wj)| wj * d.mean).sum();
    let upper = v >= qbar_med;
    let value = |s: f64| -> f64 {
        dists
            .iter()
            .zip(w)
            .map(|(d, &wj)| {
                wj * if upper {
                    d.upper_quantile(s)
                } else {
                    d.quantile(s)
                }
            })
            .sum()
    };
    // in the upper tail the value decreases in s, in the lower tail it increases
    let (mut lo, mut hi) = ((f64::MIN_POSITIVE).ln(), 0.5f64.ln());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let val = value(mid.exp());
        let go_left = if upper { val < v } else { val > v };
        if go_left {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    ((0.5 * (lo + hi)).exp(), upper)
}

/// Density ratios against the first component on `v_grid`, for a pair of
/// distributions. The quantile-average density is the weighted harmonic mean
/// `1 / Σ_j w_j / f_j(Q_j(u))` at the level `u` where `Q̄(u) = v`.
pub fn tail_ratio_profile(
    dists: &[Gaussian; 2],
    weights: &[f64; 2],
    v_grid: &[f64],
) -> Result<TailProfile> {
    check_simplex(2, weights)?;
    let mut out = TailProfile::default();
    for &v in v_grid {
        let f1 = dists[0].pdf(v);
        let f = mixture_pdf(dists, weights, v);
        let (s, upper) = solve_level(dists, weights, v);
        let mut inv = 0.0;
        for (d, &wj) in dists.iter().zip(weights) {
            if wj == 0.0 {
                continue;
            }
            let qj = if upper {
                d.upper_quantile(s)
            } else {
                d.quantile(s)
            };
            inv += wj / d.pdf(qj);
        }
        let fbar = 1.0 / inv;
        let usable = |x: f64| x.is_finite() && x >= f64::MIN_POSITIVE;
        if !(usable(f1) && usable(f) && usable(fbar)) {
            log::warn!("density underflow at v = {v}; row omitted");
            out.omitted.push(v);
            continue;
        }
        out.rows.push(TailRow {
            v,
            prob_ratio: f / f1,
            quant_ratio: fbar / f1,
        });
    }
    Ok(out)
}

/// One row of the probability-versus-quantile averaging table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FigureRow {
    pub u: f64,
    /// Quantile-average value `Q̄(u)`.
    pub qbar: f64,
    /// Probability-average CDF at `Q̄(u)`.
    pub cdf: f64,
    /// Probability-average density at `Q̄(u)`.
    pub density: f64,
    /// Quantile-average density at `Q̄(u)`.
    pub qbar_density: f64,
}

/// Rows `(u, Q̄, F, f, f̄)` evaluated at `v = Q̄(u)` on every `stride`-th level.
pub fn figure_table(dists: &[Gaussian], weights: &[f64], stride: usize) -> Result<Vec<FigureRow>> {
    let qa = quantile_average(dists, weights)?;
    let stride = stride.max(1);
    Ok((0..qa.u.len())
        .step_by(stride)
        .map(|i| {
            let v = qa.quantiles[i];
            FigureRow {
                u: qa.u[i],
                qbar: v,
                cdf: mixture_cdf(dists, weights, v),
                density: mixture_pdf(dists, weights, v),
                qbar_density: qa.density[i],
            }
        })
        .collect())
}

pub fn write_figure_csv<W: Write>(rows: &[FigureRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["u", "qbar", "F", "f", "fbar"])?;
    for r in rows {
        w.write_record(&[
            format!("{:.6e}", r.u),
            format!("{:.6e}", r.qbar),
            format!("{:.6e}", r.cdf),
            format!("{:.6e}", r.density),
            format!("{:.6e}", r.qbar_density),
        ])?;
    }
    w.flush()?;
    Ok(())
}
