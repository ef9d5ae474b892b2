//! Out-of-fold base predictions and the fold bookkeeping behind them.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basemodels::{self, BaseModelKind, FitOptions, FittedBaseModel};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scoring::QuantileGrid;
use crate::seed;

/// Where the predictions in a cube came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    /// `trained_without[i·p + j]` names the fold excluded from the model
    /// that predicted row `i` for base model `j`.
    OutOfFold {
        fold_of: Vec<usize>,
        trained_without: Vec<usize>,
    },
    /// Models fitted on every row they predict (fine for test rows, not for
    /// training an aggregator).
    InSample,
    /// Supplied by the caller, who vouches that they are out of sample.
    External,
}

/// `n × p × m` base predictions, stored as an `n × (p·m)` matrix whose rows
/// are laid out `[j][ν]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasePredCube {
    pub p: usize,
    pub m: usize,
    pub values: Mat,
    pub provenance: Provenance,
}

impl BasePredCube {
    pub fn n(&self) -> usize {
        self.values.rows
    }

    /// Stacks per-model `n×m` predictions.
    pub fn from_models(preds: &[Mat], provenance: Provenance) -> Result<Self> {
        let Some(first) = preds.first() else {
            return Err(Error::Shape("no base models".into()));
        };
        let (n, m) = first.shape();
        if preds.iter().any(|p| p.shape() != (n, m)) {
            return Err(Error::Shape("base predictions disagree in shape".into()));
        }
        let p = preds.len();
        let mut values = Mat::zeros(n, p * m);
        for i in 0..n {
            let row = values.row_mut(i);
            for (j, pj) in preds.iter().enumerate() {
                row[j * m..(j + 1) * m].copy_from_slice(pj.row(i));
            }
        }
        Ok(BasePredCube {
            p,
            m,
            values,
            provenance,
        })
    }

    pub fn get(&self, i: usize, j: usize, level: usize) -> f64 {
        self.values.data[i * self.p * self.m + j * self.m + level]
    }

    /// The `n×m` predictions of base model `j`.
    pub fn model(&self, j: usize) -> Mat {
        self.values
            .select_cols(&(j * self.m..(j + 1) * self.m).collect::<Vec<_>>())
    }

    /// Sub-cube on the given rows, provenance carried along.
    pub fn select_rows(&self, idx: &[usize]) -> BasePredCube {
        let provenance = match &self.provenance {
            Provenance::OutOfFold {
                fold_of,
                trained_without,
            } => Provenance::OutOfFold {
                fold_of: idx.iter().map(|&i| fold_of[i]).collect(),
                trained_without: idx
                    .iter()
                    .flat_map(|&i| trained_without[i * self.p..(i + 1) * self.p].iter().copied())
                    .collect(),
            },
            other => other.clone(),
        };
        BasePredCube {
            p: self.p,
            m: self.m,
            values: self.values.select_rows(idx),
            provenance,
        }
    }

    /// Fails unless every prediction is out of sample for its row.
    pub fn check_trainable(&self) -> Result<()> {
        match &self.provenance {
            Provenance::External => Ok(()),
            Provenance::InSample => Err(Error::Provenance(
                "aggregator training needs out-of-fold base predictions".into(),
            )),
            Provenance::OutOfFold {
                fold_of,
                trained_without,
            } => {
                if fold_of.len() != self.n() || trained_without.len() != self.n() * self.p {
                    return Err(Error::Provenance("provenance tags do not cover the cube".into()));
                }
                for (i, &k) in fold_of.iter().enumerate() {
                    for j in 0..self.p {
                        if trained_without[i * self.p + j] != k {
                            return Err(Error::Provenance(format!(
                                "row {i}, model {j}: predicted by a model that saw fold {k}"
                            )));
                        }
                    }
                }
                Ok(())
            }
        }
    }
}

/// Seeded partition of `0..n` into `k` folds whose sizes differ by at most one.
pub fn assign_folds(n: usize, k: usize, seed_value: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(Error::Data(format!("{n} rows cannot fill {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::derive_str(seed_value, "folds")));
    let mut fold_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % k;
    }
    Ok(fold_of)
}

/// Counts base-model fits per model index.
#[derive(Debug)]
pub struct FitCounter {
    counts: Vec<AtomicUsize>,
}

impl FitCounter {
    pub fn new(p: usize) -> Self {
        FitCounter {
            counts: (0..p).map(|_| AtomicUsize::new(0)).collect(),
        }
    }

    pub fn record(&self, model: usize) {
        self.counts[model].fetch_add(1, Ordering::Relaxed);
    }

    pub fn per_model(&self) -> Vec<usize> {
        self.counts.iter().map(|c| c.load(Ordering::Relaxed)).collect()
    }

    pub fn total(&self) -> usize {
        self.per_model().iter().sum()
    }
}

/// Seed for fitting base model `j` on the data excluding `tag` (a fold label).
pub(crate) fn fit_seed(base: u64, j: usize, tag: &str) -> u64 {
    seed::derive_str(seed::derive(base, j as u64), tag)
}

pub struct OofOutput {
    pub cube: BasePredCube,
    pub fold_of: Vec<usize>,
    /// Each base model refitted on all rows, for prediction at new points.
    pub full_models: Vec<FittedBaseModel>,
}

/// Fits every base model once per fold (on the other folds) and once on the
/// full data; the fold fits fill the cube for their held-out rows.
#[allow(clippy::too_many_arguments)]
pub fn build_oof_cube(
    kinds: &[BaseModelKind],
    x: &Mat,
    y: &[f64],
    grid: &QuantileGrid,
    k: usize,
    seed_value: u64,
    options: &FitOptions,
    counter: &FitCounter,
) -> Result<OofOutput> {
    if kinds.is_empty() {
        return Err(Error::Config("no base models".into()));
    }
    let n = y.len();
    let fold_of = assign_folds(n, k, seed_value)?;
    let members: Vec<Vec<usize>> = (0..k)
        .map(|f| (0..n).filter(|&i| fold_of[i] == f).collect())
        .collect();
    if let Some(f) = members.iter().position(|m| m.is_empty()) {
        return Err(Error::Data(format!("fold {f} is empty")));
    }

    // job (j, Some(f)) trains model j without fold f; (j, None) on all rows
    let jobs: Vec<(usize, Option<usize>)> = (0..kinds.len())
        .flat_map(|j| (0..k).map(move |f| (j, Some(f))).chain(std::iter::once((j, None))))
        .collect();
    let results: Vec<Result<(FittedBaseModel, Option<Mat>)>> = jobs
        .par_iter()
        .map(|&(j, fold)| {
            counter.record(j);
            match fold {
                Some(f) => {
                    let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
                    let opts = options.with_seed(fit_seed(seed_value, j, &format!("fold{f}")));
                    let model = basemodels::fit(&kinds[j], &x.select_rows(&train), &select(y, &train), grid, &opts)?;
                    let preds = model.predict(&x.select_rows(&members[f]))?;
                    Ok((model, Some(preds)))
                }
                None => {
                    let opts = options.with_seed(fit_seed(seed_value, j, "full"));
                    Ok((basemodels::fit(&kinds[j], x, y, grid, &opts)?, None))
                }
            }
        })
        .collect();

    let p = kinds.len();
    let m = grid.len();
    let mut values = Mat::zeros(n, p * m);
    let mut trained_without = vec![usize::MAX; n * p];
    let mut full_models = Vec::with_capacity(p);
    for (&(j, fold), res) in jobs.iter().zip(results) {
        let (model, preds) = res.map_err(|e| e.in_stage("base model fit"))?;
        match (fold, preds) {
            (Some(f), Some(preds)) => {
                for (r, &i) in members[f].iter().enumerate() {
                    values.row_mut(i)[j * m..(j + 1) * m].copy_from_slice(preds.row(r));
                    trained_without[i * p + j] = f;
                }
            }
            _ => full_models.push(model),
        }
    }
    let cube = BasePredCube {
        p,
        m,
        values,
        provenance: Provenance::OutOfFold {
            fold_of: fold_of.clone(),
            trained_without,
        },
    };
    cube.check_trainable()?;
    Ok(OofOutput {
        cube,
        fold_of,
        full_models,
    })
}

pub(crate) fn select(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v[i]).collect()
}

/// Predictions of fitted models at `x`, stacked into a cube.
pub fn predict_cube(models: &[FittedBaseModel], x: &Mat, provenance: Provenance) -> Result<BasePredCube> {
    let preds = models.iter().map(|m| m.predict(x)).collect::<Result<Vec<_>>>()?;
    BasePredCube::from_models(&preds, provenance)
}
