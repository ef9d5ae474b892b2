//! Datasets, CSV ingestion, splits and standardization.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub columns: Vec<String>,
    pub target: String,
    pub x: Mat,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(name: &str, columns: Vec<String>, target: &str, x: Mat, y: Vec<f64>) -> Result<Self> {
        if x.rows != y.len() || x.cols != columns.len() {
            return Err(Error::Shape(format!(
                "dataset `{name}`: {}×{} features, {} responses, {} column names",
                x.rows,
                x.cols,
                y.len(),
                columns.len()
            )));
        }
        if !x.is_finite() || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("dataset `{name}` has non-finite values")));
        }
        Ok(Dataset {
            name: name.to_string(),
            columns,
            target: target.to_string(),
            x,
            y,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            columns: self.columns.clone(),
            target: self.target.clone(),
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

/// A row dropped during ingestion.
#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    /// 1-based line number in the file (the header is line 1).
    pub line: u64,
    pub reason: String,
}

/// Reads a headered numeric CSV. Rows with unparsable or non-finite cells,
/// or the wrong number of fields, are skipped and reported.
pub fn ingest_csv(path: &Path, target: &str) -> Result<(Dataset, Vec<Rejection>)> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let Some(t) = headers.iter().position(|h| h == target) else {
        return Err(Error::Data(format!(
            "target column `{target}` not found; available columns: {}",
            headers.join(", ")
        )));
    };
    let columns: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != t)
        .map(|(_, h)| h.clone())
        .collect();
    let mut data = Vec::new();
    let mut y = Vec::new();
    let mut rejected = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != headers.len() {
            rejected.push(Rejection {
                line,
                reason: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, String> = record
            .iter()
            .enumerate()
            .map(|(c, cell)| match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                Ok(v) => Err(format!("column `{}` is {v}", headers[c])),
                Err(_) => Err(format!("column `{}` is not numeric: `{cell}`", headers[c])),
            })
            .collect();
        match parsed {
            Ok(row) => {
                for (c, v) in row.into_iter().enumerate() {
                    if c == t {
                        y.push(v);
                    } else {
                        data.push(v);
                    }
                }
            }
            Err(reason) => rejected.push(Rejection { line, reason }),
        }
    }
    for r in &rejected {
        log::warn!("{}: line {} rejected: {}", path.display(), r.line, r.reason);
    }
    if !rejected.is_empty() {
        log::warn!("{}: {} rows rejected", path.display(), rejected.len());
    }
    let n = y.len();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into());
    let x = Mat::from_vec(n, columns.len(), data)?;
    Ok((Dataset::new(&name, columns, target, x, y)?, rejected))
}

/// Row indices of the train, validation and test splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle cut into train/validation/test by the given fractions.
pub fn split_indices(n: usize, train: f64, validation: f64, seed_value: u64) -> Result<Split> {
    if !(train > 0.0 && validation > 0.0 && train + validation < 1.0) {
        return Err(Error::Config(format!(
            "split fractions {train}/{validation} leave no room for a test split"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed::derive_str(seed_value, "split")));
    let n_train = (n as f64 * train).round() as usize;
    let n_val = (n as f64 * validation).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::Data(format!("{n} rows are too few to split")));
    }
    let test = idx.split_off(n_train + n_val);
    let validation = idx.split_off(n_train);
    Ok(Split {
        train: idx,
        validation,
        test,
    })
}

/// Location-scale standardization of features and response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub kept: Vec<usize>,
    pub x_mean: Vec<f64>,
    pub x_sd: Vec<f64>,
    pub y_mean: f64,
    pub y_sd: f64,
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Standardization {
    /// Statistics from the given rows only; zero-variance feature columns are dropped.
    pub fn fit(data: &Dataset, rows: &[usize]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::Data("standardization needs at least 2 rows".into()));
        }
        let (mut kept, mut x_mean, mut x_sd) = (Vec::new(), Vec::new(), Vec::new());
        for j in 0..data.x.cols {
            let (m, s) = mean_sd(rows.iter().map(|&i| data.x.get(i, j)));
            if s > 1e-12 {
                kept.push(j);
                x_mean.push(m);
                x_sd.push(s);
            } else {
                log::warn!("feature `{}` is constant; dropping it", data.columns[j]);
            }
        }
        let (y_mean, y_sd) = mean_sd(rows.iter().map(|&i| data.y[i]));
        if !(y_sd > 1e-12) {
            return Err(Error::Data("response is constant on the fitting rows".into()));
        }
        Ok(Standardization {
            kept,
            x_mean,
            x_sd,
            y_mean,
            y_sd,
        })
    }

    pub fn transform_x(&self, x: &Mat) -> Mat {
        let mut out = Mat::zeros(x.rows, self.kept.len());
        for i in 0..x.rows {
            let src = x.row(i);
            for (k, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = (src[self.kept[k]] - self.x_mean[k]) / self.x_sd[k];
            }
        }
        out
    }

    pub fn transform_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.y_mean) / self.y_sd).collect()
    }

    /// Maps standardized quantiles back to response units.
    pub fn inverse_quantiles(&self, q: &Mat) -> Mat {
        let mut out = q.clone();
        for v in &mut out.data {
            *v = *v * self.y_sd + self.y_mean;
        }
        out
    }
}
