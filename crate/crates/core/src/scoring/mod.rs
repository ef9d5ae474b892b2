//! Proper scoring rules for quantile forecasts and the evaluation metrics
//! reported by the harness.
//!
//! The canonical weighted interval score is `2 · pinball_sum`. The interval
//! form [`wis_interval`] is available only for grids without the median,
//! where the two coincide exactly.

mod grid;

pub use grid::{QuantileGrid, LEVEL_TOL};

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Pinball (tilted absolute) loss of the level-`tau` quantile `q` at `y`.
pub fn pinball(tau: f64, y: f64, q: f64) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Domain(format!("level {tau} is outside (0, 1)")));
    }
    Ok(pinball_unchecked(tau, y, q))
}

#[inline]
pub(crate) fn pinball_unchecked(tau: f64, y: f64, q: f64) -> f64 {
    let r = y - q;
    if r >= 0.0 {
        tau * r
    } else {
        (tau - 1.0) * r
    }
}

/// `Σ_τ ψ_τ(y − q(τ))` over the grid.
pub fn pinball_sum(grid: &QuantileGrid, y: f64, q: &[f64]) -> Result<f64> {
    grid.check_len(q.len())?;
    Ok(grid
        .levels()
        .iter()
        .zip(q)
        .map(|(&t, &qv)| pinball_unchecked(t, y, qv))
        .sum())
}

/// Weighted interval score, computed as `2 · pinball_sum`.
pub fn wis(grid: &QuantileGrid, q: &[f64], y: f64) -> Result<f64> {
    Ok(2.0 * pinball_sum(grid, y, q)?)
}

/// Weighted interval score in its interval form,
/// `Σ_α { α (u_α − ℓ_α) + 2 dist(y, [ℓ_α, u_α]) }`.
///
/// Only defined for symmetric grids without 0.5: with the median present the
/// `α = 1` summand would count the median term twice.
pub fn wis_interval(grid: &QuantileGrid, q: &[f64], y: f64) -> Result<f64> {
    grid.check_len(q.len())?;
    if !grid.is_symmetric() {
        return Err(Error::Contract(
            "interval-form WIS needs a grid symmetric around 0.5".into(),
        ));
    }
    if grid.has_median() {
        return Err(Error::Contract(
            "interval-form WIS is not defined for grids containing 0.5".into(),
        ));
    }
    let m = grid.len();
    if (0..m / 2).any(|k| q[k] > q[m - 1 - k]) {
        return Err(Error::Contract(
            "interval-form WIS needs lower endpoints at or below upper endpoints".into(),
        ));
    }
    let mut total = 0.0;
    for k in 0..m / 2 {
        let alpha = 2.0 * grid.levels()[k];
        let (lo, hi) = (q[k], q[m - 1 - k]);
        total += alpha * (hi - lo) + 2.0 * dist_to_interval(y, lo, hi);
    }
    Ok(total)
}

/// Distance from `y` to `[lo, hi]`; zero inside.
fn dist_to_interval(y: f64, lo: f64, hi: f64) -> f64 {
    if y < lo {
        lo - y
    } else if y > hi {
        y - hi
    } else {
        0.0
    }
}

/// Riemann approximation of the CRPS from an evenly spaced grid:
/// `(2 / m) · pinball_sum`.
pub fn crps_discrete(grid: &QuantileGrid, q: &[f64], y: f64) -> Result<f64> {
    if !grid.is_evenly_spaced() {
        return Err(Error::Contract(
            "discretized CRPS requires evenly spaced levels".into(),
        ));
    }
    Ok(2.0 / grid.len() as f64 * pinball_sum(grid, y, q)?)
}

/// Proportion of variance explained by median predictions.
pub fn pve(median_preds: &[f64], y_test: &[f64]) -> Result<f64> {
    if median_preds.len() != y_test.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} responses",
            median_preds.len(),
            y_test.len()
        )));
    }
    if y_test.len() < 2 {
        return Err(Error::Domain("PVE needs at least two test responses".into()));
    }
    let mean = y_test.iter().sum::<f64>() / y_test.len() as f64;
    let ss_tot: f64 = y_test.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Domain(
            "PVE undefined: test responses are constant (division by zero)".into(),
        ));
    }
    let ss_res: f64 = y_test
        .iter()
        .zip(median_preds)
        .map(|(y, p)| (y - p).powi(2))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Empirical coverage and mean length of the central `1 − α` intervals.
pub fn coverage_and_length(
    grid: &QuantileGrid,
    preds: &[Vec<f64>],
    y: &[f64],
    alpha: f64,
) -> Result<(f64, f64)> {
    if preds.len() != y.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} responses",
            preds.len(),
            y.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::Domain("coverage of an empty test set".into()));
    }
    let (lo, hi) = grid.interval_indices(alpha)?;
    let mut covered = 0usize;
    let mut length = 0.0;
    for (q, &yi) in preds.iter().zip(y) {
        grid.check_len(q.len())?;
        if q[lo] <= yi && yi <= q[hi] {
            covered += 1;
        }
        length += q[hi] - q[lo];
    }
    let n = y.len() as f64;
    Ok((covered as f64 / n, length / n))
}

/// Mean WIS over a set of predictions.
pub fn mean_wis(grid: &QuantileGrid, preds: &[Vec<f64>], y: &[f64]) -> Result<f64> {
    if preds.len() != y.len() || y.is_empty() {
        return Err(Error::Shape(format!(
            "{} predictions for {} responses",
            preds.len(),
            y.len()
        )));
    }
    let mut total = 0.0;
    for (q, &yi) in preds.iter().zip(y) {
        total += wis(grid, q, yi)?;
    }
    Ok(total / y.len() as f64)
}

/// Mean WIS over the rows of an `n×m` prediction matrix.
pub fn mean_wis_rows(grid: &QuantileGrid, preds: &Mat, y: &[f64]) -> Result<f64> {
    if preds.rows != y.len() || y.is_empty() {
        return Err(Error::Shape(format!(
            "{} predictions for {} responses",
            preds.rows,
            y.len()
        )));
    }
    grid.check_len(preds.cols)?;
    let levels = grid.levels();
    let mut total = 0.0;
    for (q, &yi) in preds.iter_rows().zip(y) {
        let s: f64 = levels
            .iter()
            .zip(q)
            .map(|(&t, &qv)| pinball_unchecked(t, yi, qv))
            .sum();
        total += 2.0 * s;
    }
    Ok(total / y.len() as f64)
}

/// Lower empirical quantile: the `⌈τ n⌉`-th order statistic (1-based) of an
/// ascending slice, clamped to `[1, n]`.
pub fn empirical_quantile_sorted(sorted: &[f64], tau: f64) -> f64 {
    let n = sorted.len();
    let k = ((tau * n as f64) - 1e-12).ceil().clamp(1.0, n as f64) as usize;
    sorted[k - 1]
}

/// [`empirical_quantile_sorted`] on unsorted data.
pub fn empirical_quantile(values: &[f64], tau: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Domain("empirical quantile of an empty set".into()));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(empirical_quantile_sorted(&s, tau))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use statrs::distribution::{Continuous, ContinuousCDF, Normal};

    fn two_level() -> QuantileGrid {
        QuantileGrid::new(vec![0.1, 0.9]).unwrap()
    }

    #[test]
    fn pinball_values() {
        assert_eq!(pinball(0.5, 2.0, 0.0).unwrap(), 1.0);
        assert_abs_diff_eq!(pinball(0.9, 1.0, 0.0).unwrap(), 0.9);
        assert_abs_diff_eq!(pinball(0.25, 0.0, 2.0).unwrap(), 1.5);
        assert!(pinball(0.0, 1.0, 0.0).is_err());
        assert!(pinball(1.0, 1.0, 0.0).is_err());
        assert!(pinball(f64::NAN, 1.0, 0.0).is_err());
    }

    #[test]
    fn pinball_sum_and_wis_by_hand() {
        let g = two_level();
        assert_abs_diff_eq!(pinball_sum(&g, 3.0, &[0.0, 2.0]).unwrap(), 1.2, epsilon = 1e-12);
        assert_abs_diff_eq!(pinball_sum(&g, 1.0, &[0.0, 2.0]).unwrap(), 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(wis_interval(&g, &[0.0, 2.0], 3.0).unwrap(), 2.4, epsilon = 1e-12);
        assert_abs_diff_eq!(wis_interval(&g, &[0.0, 2.0], 1.0).unwrap(), 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(wis(&g, &[0.0, 2.0], 3.0).unwrap(), 2.4, epsilon = 1e-12);
        assert_eq!(wis_interval(&g, &[1.0, 1.0], 1.0).unwrap(), 0.0);
        assert!(pinball_sum(&g, 1.0, &[0.0]).is_err());
    }

    #[test]
    fn zero_residuals_give_zero_loss() {
        let g = QuantileGrid::even(9);
        let q = vec![4.0; 9];
        assert_eq!(pinball_sum(&g, 4.0, &q).unwrap(), 0.0);
    }

    #[test]
    fn interval_wis_rejects_median_and_asymmetry() {
        let g = QuantileGrid::even(3);
        assert!(matches!(
            wis_interval(&g, &[0.0, 1.0, 2.0], 1.0),
            Err(Error::Contract(_))
        ));
        let g = QuantileGrid::new(vec![0.1, 0.8]).unwrap();
        assert!(matches!(wis_interval(&g, &[0.0, 1.0], 1.0), Err(Error::Contract(_))));
        let g = two_level();
        assert!(matches!(wis_interval(&g, &[2.0, 1.0], 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn wis_identity_random() {
        let mut rng = crate::seed::rng(11);
        for _ in 0..2000 {
            let k = rng.random_range(1..6);
            let mut alphas: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..0.99)).collect();
            alphas.sort_by(f64::total_cmp);
            alphas.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
            let g = QuantileGrid::from_alphas(&alphas).unwrap();
            let mut q: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-3.0..3.0)).collect();
            q.sort_by(f64::total_cmp);
            let y = rng.random_range(-4.0..4.0);
            let a = wis_interval(&g, &q, y).unwrap();
            let b = 2.0 * pinball_sum(&g, y, &q).unwrap();
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    fn gaussian_crps(mu: f64, sigma: f64, y: f64) -> f64 {
        let n = Normal::new(0.0, 1.0).unwrap();
        let z = (y - mu) / sigma;
        sigma * (z * (2.0 * n.cdf(z) - 1.0) + 2.0 * n.pdf(z) - 1.0 / std::f64::consts::PI.sqrt())
    }

    fn normal_quantiles(g: &QuantileGrid) -> Vec<f64> {
        let n = Normal::new(0.0, 1.0).unwrap();
        g.levels().iter().map(|&t| n.inverse_cdf(t)).collect()
    }

    #[test]
    fn crps_of_standard_normal_at_zero() {
        let g = QuantileGrid::even(999);
        let c = crps_discrete(&g, &normal_quantiles(&g), 0.0).unwrap();
        let exact = gaussian_crps(0.0, 1.0, 0.0);
        assert_abs_diff_eq!(exact, 0.233695, epsilon = 1e-6);
        assert!((c - exact).abs() < 1e-3, "{c} vs {exact}");
    }

    #[test]
    fn crps_error_shrinks_with_resolution() {
        for &y in &[0.0, 0.7, -1.5] {
            let exact = gaussian_crps(0.0, 1.0, y);
            let errs: Vec<f64> = [99, 999, 9999]
                .iter()
                .map(|&m| {
                    let g = QuantileGrid::even(m);
                    (crps_discrete(&g, &normal_quantiles(&g), y).unwrap() - exact).abs()
                })
                .collect();
            assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
        }
    }

    #[test]
    fn crps_point_mass() {
        let g = QuantileGrid::even(999);
        let q = vec![2.0; 999];
        assert_eq!(crps_discrete(&g, &q, 2.0).unwrap(), 0.0);
        assert_abs_diff_eq!(crps_discrete(&g, &q, 3.0).unwrap(), 1.0, epsilon = 1e-9);
        let uneven = QuantileGrid::new(vec![0.1, 0.5, 0.6]).unwrap();
        assert!(crps_discrete(&uneven, &[0.0; 3], 0.0).is_err());
    }

    #[test]
    fn pve_cases() {
        let y = [0.0, 1.0, 2.0];
        assert_eq!(pve(&y, &y).unwrap(), 1.0);
        assert_eq!(pve(&[1.0; 3], &y).unwrap(), 0.0);
        assert_abs_diff_eq!(pve(&[0.0, 1.0, 1.0], &y).unwrap(), 0.5);
        assert!(pve(&[1.0, 1.0], &[3.0, 3.0]).is_err());
        assert!(pve(&[1.0], &[3.0]).is_err());
    }

    #[test]
    fn coverage_counts() {
        let g = two_level();
        let preds = vec![vec![0.0, 2.0]; 10];
        let y: Vec<f64> = (0..10).map(|i| if i < 5 { 1.0 } else { 5.0 }).collect();
        let (c, l) = coverage_and_length(&g, &preds, &y, 0.2).unwrap();
        assert_abs_diff_eq!(c, 0.5);
        assert_abs_diff_eq!(l, 2.0);
        let degenerate = vec![vec![1.0, 1.0]; 3];
        let (c, l) = coverage_and_length(&g, &degenerate, &[1.0; 3], 0.2).unwrap();
        assert_eq!((c, l), (1.0, 0.0));
        assert!(coverage_and_length(&g, &preds, &y, 0.5).is_err());
    }

    #[test]
    fn empirical_quantile_convention() {
        let r = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(empirical_quantile(&r, 0.2).unwrap(), 1.0);
        assert_eq!(empirical_quantile(&r, 0.8).unwrap(), 4.0);
        assert_eq!(empirical_quantile(&r, 0.21).unwrap(), 2.0);
        assert_eq!(empirical_quantile(&r, 0.99).unwrap(), 5.0);
        assert!(empirical_quantile(&[], 0.5).is_err());
    }
}
