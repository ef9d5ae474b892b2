//! Nested cross-validation for conformalizing an aggregator.
//!
//! Base model `j` is fitted once per unordered fold pair `{k, ℓ}` on the
//! rows outside both folds. The aggregator for outer fold `k` trains on the
//! inner out-of-fold cube over the other folds, where a row in fold `ℓ` is
//! predicted by the `{k, ℓ}` model. When the fold-`k` aggregator predicts
//! (its calibration rows or new points), the base prediction of model `j` is
//! the mean of its `K−1` pair models `{k, ℓ}`, all of which excluded fold `k`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{cv_plus, ConformalResiduals, Interval};
use crate::aggregator::{
    assign_folds, fit_combiner, fit_seed, select, AggData, AggregatorConfig, BasePredCube,
    FitCounter, FittedAggregator, Provenance, Trainable,
};
use crate::basemodels::{self, BaseModelKind, FitOptions, FittedBaseModel};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scoring::QuantileGrid;
use crate::seed;

/// Base models fitted without folds `pair.0` and `pair.1` (`pair.0 < pair.1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairModels {
    pub pair: (usize, usize),
    pub models: Vec<FittedBaseModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldEnsemble {
    pub fold: usize,
    pub aggregator: FittedAggregator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestedConformal {
    pub grid: QuantileGrid,
    pub k: usize,
    pub fold_of: Vec<usize>,
    pub pair_models: Vec<PairModels>,
    pub folds: Vec<FoldEnsemble>,
    pub residuals: ConformalResiduals,
}

fn key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

fn pair_lookup<'a>(
    cache: &'a BTreeMap<(usize, usize), Vec<FittedBaseModel>>,
    a: usize,
    b: usize,
) -> Result<&'a [FittedBaseModel]> {
    cache.get(&key(a, b)).map(Vec::as_slice).ok_or_else(|| {
        Error::Contract(format!(
            "internal invariant: no base models cached for fold pair {:?}",
            key(a, b)
        ))
    })
}

/// Base predictions for the fold-`k` aggregator: per model, the mean over
/// `ℓ ≠ k` of the `{k, ℓ}` pair model.
fn outer_cube(
    cache: &BTreeMap<(usize, usize), Vec<FittedBaseModel>>,
    kfolds: usize,
    k: usize,
    x: &Mat,
) -> Result<BasePredCube> {
    let mut sums: Option<Vec<Mat>> = None;
    for l in (0..kfolds).filter(|&l| l != k) {
        let models = pair_lookup(cache, k, l)?;
        let preds = models.iter().map(|m| m.predict(x)).collect::<Result<Vec<_>>>()?;
        match &mut sums {
            None => sums = Some(preds),
            Some(acc) => {
                for (a, p) in acc.iter_mut().zip(preds) {
                    a.data.iter_mut().zip(p.data).for_each(|(s, v)| *s += v);
                }
            }
        }
    }
    let mut sums = sums.expect("at least two folds");
    let scale = 1.0 / (kfolds - 1) as f64;
    for s in &mut sums {
        s.data.iter_mut().for_each(|v| *v *= scale);
    }
    BasePredCube::from_models(&sums, Provenance::External)
}

impl NestedConformal {
    fn cache(&self) -> BTreeMap<(usize, usize), Vec<FittedBaseModel>> {
        self.pair_models
            .iter()
            .map(|p| (p.pair, p.models.clone()))
            .collect()
    }

    /// Fold-`k` aggregator predictions at `x` (post-isotonized as configured).
    pub fn fold_predict(&self, k: usize, x: &Mat) -> Result<Mat> {
        let cube = outer_cube(&self.cache(), self.k, k, x)?;
        self.folds[k].aggregator.predict(&cube, x)
    }

    /// CV+ intervals per row of `x` and per α of the stored residuals.
    pub fn intervals(&self, x: &Mat) -> Result<Vec<Vec<Interval>>> {
        let cache = self.cache();
        let fold_preds = (0..self.k)
            .map(|k| {
                let cube = outer_cube(&cache, self.k, k, x)?;
                self.folds[k].aggregator.predict(&cube, x)
            })
            .collect::<Result<Vec<_>>>()?;
        cv_plus(&self.grid, &self.residuals, &fold_preds)
    }

    pub fn alphas(&self) -> &[f64] {
        &self.residuals.alphas
    }
}

#[derive(Debug)]
pub struct NestedOutput {
    pub model: NestedConformal,
    /// Distinct base-model trainings, per base model.
    pub base_fits: Vec<usize>,
}

/// Runs the nested scheme on `(x, y)` and returns a CV+ conformal model.
#[allow(clippy::too_many_arguments)]
pub fn nested_conformalize(
    kinds: &[BaseModelKind],
    combiner: Trainable,
    config: &AggregatorConfig,
    grid: &QuantileGrid,
    alphas: &[f64],
    x: &Mat,
    y: &[f64],
    k: usize,
    seed_value: u64,
    fit_options: &FitOptions,
) -> Result<NestedOutput> {
    if k < 3 {
        return Err(Error::Config(format!(
            "nested conformalization needs at least 3 folds, got {k}"
        )));
    }
    if kinds.is_empty() {
        return Err(Error::Config("no base models".into()));
    }
    for &a in alphas {
        grid.interval_indices(a)?;
    }
    let n = y.len();
    let fold_of = assign_folds(n, k, seed_value)?;
    let counter = FitCounter::new(kinds.len());

    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|a| (a + 1..k).map(move |b| (a, b))).collect();
    let jobs: Vec<((usize, usize), usize)> = pairs
        .iter()
        .flat_map(|&pr| (0..kinds.len()).map(move |j| (pr, j)))
        .collect();
    let fitted: Vec<Result<FittedBaseModel>> = jobs
        .par_iter()
        .map(|&((a, b), j)| {
            counter.record(j);
            let rows: Vec<usize> = (0..n).filter(|&i| fold_of[i] != a && fold_of[i] != b).collect();
            let opts = fit_options.with_seed(fit_seed(seed_value, j, &format!("pair{a}-{b}")));
            basemodels::fit(&kinds[j], &x.select_rows(&rows), &select(y, &rows), grid, &opts)
        })
        .collect();
    let mut cache: BTreeMap<(usize, usize), Vec<FittedBaseModel>> = BTreeMap::new();
    for (&(pr, _), model) in jobs.iter().zip(fitted) {
        let model = model.map_err(|e| e.in_stage("nested base fit"))?;
        cache.entry(pr).or_default().push(model);
    }

    // aggregator per outer fold, trained on the inner out-of-fold cube
    let aggregators: Vec<Result<(FittedAggregator, Mat)>> = (0..k)
        .into_par_iter()
        .map(|outer| {
            let rows: Vec<usize> = (0..n).filter(|&i| fold_of[i] != outer).collect();
            let p = kinds.len();
            let m = grid.len();
            let mut values = Mat::zeros(rows.len(), p * m);
            let mut trained_without = vec![0; rows.len() * p];
            for l in (0..k).filter(|&l| l != outer) {
                let members: Vec<usize> = (0..rows.len()).filter(|&r| fold_of[rows[r]] == l).collect();
                let xs = x.select_rows(&members.iter().map(|&r| rows[r]).collect::<Vec<_>>());
                for (j, model) in pair_lookup(&cache, outer, l)?.iter().enumerate() {
                    let preds = model.predict(&xs)?;
                    for (t, &r) in members.iter().enumerate() {
                        values.row_mut(r)[j * m..(j + 1) * m].copy_from_slice(preds.row(t));
                        trained_without[r * p + j] = l;
                    }
                }
            }
            let cube = BasePredCube {
                p,
                m,
                values,
                provenance: Provenance::OutOfFold {
                    fold_of: rows.iter().map(|&i| fold_of[i]).collect(),
                    trained_without,
                },
            };
            let xr = x.select_rows(&rows);
            let yr = select(y, &rows);
            let cfg = AggregatorConfig {
                seed: seed::derive_str(seed::derive(seed_value, outer as u64), "nested-aggregator"),
                ..config.clone()
            };
            let agg = fit_combiner(combiner, &cfg, grid, AggData { cube: &cube, x: &xr, y: &yr }, None)?;
            let held: Vec<usize> = (0..n).filter(|&i| fold_of[i] == outer).collect();
            let xh = x.select_rows(&held);
            let preds = agg.predict(&outer_cube(&cache, k, outer, &xh)?, &xh)?;
            Ok((agg, preds))
        })
        .collect();

    let mut folds = Vec::with_capacity(k);
    let mut calib_preds = Mat::zeros(n, grid.len());
    for (outer, res) in aggregators.into_iter().enumerate() {
        let (agg, preds) = res.map_err(|e| e.in_stage("nested aggregator fit"))?;
        let held: Vec<usize> = (0..n).filter(|&i| fold_of[i] == outer).collect();
        for (t, &i) in held.iter().enumerate() {
            calib_preds.row_mut(i).copy_from_slice(preds.row(t));
        }
        folds.push(FoldEnsemble {
            fold: outer,
            aggregator: agg,
        });
    }
    let ids: Vec<usize> = (0..n).collect();
    let residuals = ConformalResiduals::compute(grid, alphas, &calib_preds, y, &ids, &fold_of)?;
    let pair_models = cache
        .into_iter()
        .map(|(pair, models)| PairModels { pair, models })
        .collect();
    Ok(NestedOutput {
        model: NestedConformal {
            grid: grid.clone(),
            k,
            fold_of,
            pair_models,
            folds,
            residuals,
        },
        base_fits: counter.per_model(),
    })
}
