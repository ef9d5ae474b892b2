//! Conformalized quantile regression: split CQR, CV+, and the nested
//! cross-validation scheme for aggregators.
//!
//! Intervals for a miscoverage level α use the grid's `α/2` and `1−α/2`
//! quantiles. Endpoints that the modified quantile cannot bound are stored
//! as `±∞` and counted separately in summaries. Conformalized intervals are
//! not re-isotonized across α; inversions are counted instead.

mod nested;

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use nested::{nested_conformalize, FoldEnsemble, NestedConformal, NestedOutput};

use crate::aggregator::{assign_folds, select};
use crate::basemodels::{self, BaseModelKind, FitOptions, FittedBaseModel};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scoring::QuantileGrid;
use crate::seed;

/// The `⌈τ(n+1)⌉`-th order statistic of `s`, or `+∞` when that index exceeds `n`.
pub fn modified_quantile(s: &[f64], tau: f64) -> Result<f64> {
    if s.is_empty() {
        return Err(Error::Domain("modified quantile of an empty set".into()));
    }
    let mut v = s.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(modified_quantile_sorted(&v, tau))
}

fn rank(n: usize, tau: f64) -> usize {
    ((tau * (n as f64 + 1.0)) - 1e-12).ceil().max(1.0) as usize
}

pub(crate) fn modified_quantile_sorted(sorted: &[f64], tau: f64) -> f64 {
    let k = rank(sorted.len(), tau);
    if k > sorted.len() {
        f64::INFINITY
    } else {
        sorted[k - 1]
    }
}

/// `−Q̃⁺_τ(−S)`: the mirrored order statistic, `−∞` when unbounded.
pub fn modified_quantile_lower(s: &[f64], tau: f64) -> Result<f64> {
    let neg: Vec<f64> = s.iter().map(|v| -v).collect();
    Ok(-modified_quantile(&neg, tau)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn is_bounded(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite()
    }

    pub fn contains(&self, y: f64) -> bool {
        self.lo <= y && y <= self.hi
    }

    pub fn length(&self) -> f64 {
        self.hi - self.lo
    }

    /// Whether `self` contains `other`.
    pub fn covers(&self, other: &Interval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }
}

/// Lower and upper conformity scores per α, one entry per calibration row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalResiduals {
    pub alphas: Vec<f64>,
    /// `lower[a][i] = q̂(x_i; α/2) − y_i`
    pub lower: Vec<Vec<f64>>,
    /// `upper[a][i] = y_i − q̂(x_i; 1−α/2)`
    pub upper: Vec<Vec<f64>>,
    /// Calibration row identifiers.
    pub ids: Vec<usize>,
    /// Fold whose model produced each row's residual.
    pub fold: Vec<usize>,
}

impl ConformalResiduals {
    pub fn compute(
        grid: &QuantileGrid,
        alphas: &[f64],
        preds: &Mat,
        y: &[f64],
        ids: &[usize],
        fold: &[usize],
    ) -> Result<Self> {
        if preds.rows != y.len() || ids.len() != y.len() || fold.len() != y.len() {
            return Err(Error::Shape("calibration inputs disagree in length".into()));
        }
        grid.check_len(preds.cols)?;
        let mut lower = Vec::with_capacity(alphas.len());
        let mut upper = Vec::with_capacity(alphas.len());
        for &a in alphas {
            let (lo, hi) = grid.interval_indices(a)?;
            lower.push((0..y.len()).map(|i| preds.get(i, lo) - y[i]).collect());
            upper.push((0..y.len()).map(|i| y[i] - preds.get(i, hi)).collect());
        }
        Ok(ConformalResiduals {
            alphas: alphas.to_vec(),
            lower,
            upper,
            ids: ids.to_vec(),
            fold: fold.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Split CQR: constant per-α endpoint offsets from a held-out calibration set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCqr {
    pub grid: QuantileGrid,
    pub alphas: Vec<f64>,
    /// `(o⁻, o⁺)` per α.
    pub offsets: Vec<(f64, f64)>,
    pub calibration_size: usize,
}

/// Calibrates `calib_preds` (from a model fitted on `train_ids`) against
/// `calib_y`. Fails when the two id sets overlap.
pub fn split_cqr(
    grid: &QuantileGrid,
    alphas: &[f64],
    calib_preds: &Mat,
    calib_y: &[f64],
    calib_ids: &[usize],
    train_ids: &[usize],
) -> Result<SplitCqr> {
    let train: std::collections::HashSet<usize> = train_ids.iter().copied().collect();
    if let Some(id) = calib_ids.iter().find(|i| train.contains(i)) {
        return Err(Error::Provenance(format!(
            "calibration row {id} was used to fit the model"
        )));
    }
    if calib_y.is_empty() {
        return Err(Error::Data("empty calibration set".into()));
    }
    let res = ConformalResiduals::compute(
        grid,
        alphas,
        calib_preds,
        calib_y,
        calib_ids,
        &vec![0; calib_y.len()],
    )?;
    let offsets = alphas
        .iter()
        .enumerate()
        .map(|(a, &alpha)| {
            let tau = 1.0 - alpha / 2.0;
            Ok((
                modified_quantile(&res.lower[a], tau)?,
                modified_quantile(&res.upper[a], tau)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SplitCqr {
        grid: grid.clone(),
        alphas: alphas.to_vec(),
        offsets,
        calibration_size: calib_y.len(),
    })
}

impl SplitCqr {
    /// Intervals per row (outer) and α (inner).
    pub fn intervals(&self, preds: &Mat) -> Result<Vec<Vec<Interval>>> {
        self.grid.check_len(preds.cols)?;
        let idx = self
            .alphas
            .iter()
            .map(|&a| self.grid.interval_indices(a))
            .collect::<Result<Vec<_>>>()?;
        Ok(preds
            .iter_rows()
            .map(|q| {
                idx.iter()
                    .zip(&self.offsets)
                    .map(|(&(lo, hi), &(olo, ohi))| Interval {
                        lo: q[lo] - olo,
                        hi: q[hi] + ohi,
                    })
                    .collect()
            })
            .collect())
    }
}

/// One CV+ interval from the per-calibration-row candidate endpoints
/// `ĝ^{−k(i)}(x; α/2) − R⁻_i` and `ĝ^{−k(i)}(x; 1−α/2) + R⁺_i`.
pub fn cv_plus_interval(lower_candidates: &[f64], upper_candidates: &[f64], alpha: f64) -> Result<Interval> {
    let tau = 1.0 - alpha / 2.0;
    Ok(Interval {
        lo: modified_quantile_lower(lower_candidates, tau)?,
        hi: modified_quantile(upper_candidates, tau)?,
    })
}

/// CV+ intervals at test points.
///
/// `fold_preds[k]` holds fold model `k`'s predictions at the test rows;
/// `residuals.fold[i]` names the model that excluded calibration row `i`.
pub fn cv_plus(
    grid: &QuantileGrid,
    residuals: &ConformalResiduals,
    fold_preds: &[Mat],
) -> Result<Vec<Vec<Interval>>> {
    if residuals.is_empty() {
        return Err(Error::Data("no calibration residuals".into()));
    }
    let k = fold_preds.len();
    if let Some(&f) = residuals.fold.iter().find(|&&f| f >= k) {
        return Err(Error::Provenance(format!("residual from fold {f} but only {k} fold models")));
    }
    let n_test = fold_preds.first().map(|m| m.rows).unwrap_or(0);
    if fold_preds.iter().any(|m| m.rows != n_test) {
        return Err(Error::Shape("fold predictions disagree in rows".into()));
    }
    let idx = residuals
        .alphas
        .iter()
        .map(|&a| grid.interval_indices(a))
        .collect::<Result<Vec<_>>>()?;
    let n = residuals.len();
    let mut lo_buf = vec![0.0; n];
    let mut hi_buf = vec![0.0; n];
    let mut out = Vec::with_capacity(n_test);
    for t in 0..n_test {
        let mut row = Vec::with_capacity(idx.len());
        for (a, &(lo, hi)) in idx.iter().enumerate() {
            for i in 0..n {
                let q = fold_preds[residuals.fold[i]].row(t);
                lo_buf[i] = q[lo] - residuals.lower[a][i];
                hi_buf[i] = q[hi] + residuals.upper[a][i];
            }
            row.push(cv_plus_interval(&lo_buf, &hi_buf, residuals.alphas[a])?);
        }
        out.push(row);
    }
    Ok(out)
}

/// CV+ over a single base model: one fit per fold, each producing the
/// residuals of its held-out rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPlusModel {
    pub grid: QuantileGrid,
    pub fold_models: Vec<FittedBaseModel>,
    pub residuals: ConformalResiduals,
}

#[allow(clippy::too_many_arguments)]
pub fn fit_cv_plus(
    kind: &BaseModelKind,
    grid: &QuantileGrid,
    alphas: &[f64],
    x: &Mat,
    y: &[f64],
    k: usize,
    seed_value: u64,
    options: &FitOptions,
) -> Result<CvPlusModel> {
    let n = y.len();
    let fold_of = assign_folds(n, k, seed_value)?;
    let fits: Vec<Result<(FittedBaseModel, Mat)>> = (0..k)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
            let held: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
            let opts = options.with_seed(seed::derive(seed_value, f as u64));
            let model = basemodels::fit(kind, &x.select_rows(&train), &select(y, &train), grid, &opts)?;
            let preds = model.predict(&x.select_rows(&held))?;
            Ok((model, preds))
        })
        .collect();
    let mut calib = Mat::zeros(n, grid.len());
    let mut fold_models = Vec::with_capacity(k);
    for (f, res) in fits.into_iter().enumerate() {
        let (model, preds) = res.map_err(|e| e.in_stage("cv+ fold fit"))?;
        let held = (0..n).filter(|&i| fold_of[i] == f);
        for (r, i) in held.enumerate() {
            calib.row_mut(i).copy_from_slice(preds.row(r));
        }
        fold_models.push(model);
    }
    let ids: Vec<usize> = (0..n).collect();
    Ok(CvPlusModel {
        grid: grid.clone(),
        fold_models,
        residuals: ConformalResiduals::compute(grid, alphas, &calib, y, &ids, &fold_of)?,
    })
}

impl CvPlusModel {
    pub fn intervals(&self, x: &Mat) -> Result<Vec<Vec<Interval>>> {
        let preds = self
            .fold_models
            .iter()
            .map(|m| m.predict(x))
            .collect::<Result<Vec<_>>>()?;
        cv_plus(&self.grid, &self.residuals, &preds)
    }
}

/// Coverage statistics for one α.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalSummary {
    pub alpha: f64,
    pub coverage: f64,
    /// Mean length over bounded intervals (NaN when none are bounded).
    pub mean_length: f64,
    pub unbounded_count: usize,
}

/// Per-α coverage, mean bounded length and unbounded count.
pub fn summarize(alphas: &[f64], intervals: &[Vec<Interval>], y: &[f64]) -> Result<Vec<ConformalSummary>> {
    if intervals.len() != y.len() || y.is_empty() {
        return Err(Error::Shape("intervals and responses disagree".into()));
    }
    Ok(alphas
        .iter()
        .enumerate()
        .map(|(a, &alpha)| {
            let mut covered = 0usize;
            let mut unbounded = 0usize;
            let mut total = 0.0;
            for (row, &yi) in intervals.iter().zip(y) {
                let iv = row[a];
                covered += usize::from(iv.contains(yi));
                if iv.is_bounded() {
                    total += iv.length();
                } else {
                    unbounded += 1;
                }
            }
            let bounded = y.len() - unbounded;
            ConformalSummary {
                alpha,
                coverage: covered as f64 / y.len() as f64,
                mean_length: if bounded > 0 { total / bounded as f64 } else { f64::NAN },
                unbounded_count: unbounded,
            }
        })
        .collect())
}

/// Rows where a smaller α (wider nominal interval) fails to contain the
/// interval of a larger α. `alphas` must be sorted ascending.
pub fn count_inversions(intervals: &[Vec<Interval>]) -> usize {
    intervals
        .iter()
        .filter(|row| row.windows(2).any(|w| !w[0].covers(&w[1])))
        .count()
}

pub fn write_summary_csv(path: &Path, rows: &[ConformalSummary]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "alpha,coverage,mean_length,unbounded_count")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{}",
            crate::harness::fmt_sig(r.alpha),
            crate::harness::fmt_sig(r.coverage),
            crate::harness::fmt_sig(r.mean_length),
            r.unbounded_count
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Scales standardized intervals back to response units.
pub fn destandardize(intervals: &mut [Vec<Interval>], mean: f64, sd: f64) {
    for row in intervals {
        for iv in row {
            iv.lo = iv.lo * sd + mean;
            iv.hi = iv.hi * sd + mean;
        }
    }
}
