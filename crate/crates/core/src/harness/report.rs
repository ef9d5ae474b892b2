//! Experiment reports and their CSV / JSON serialization.
//!
//! Floats are written with 6 significant digits. The CSV has one `detail`
//! row per (dataset, seed, method) and one `aggregate` row per
//! (dataset, method) carrying seed means and standard errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::fmt_sig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Detail,
    Aggregate,
}

impl RowKind {
    fn name(self) -> &'static str {
        match self {
            RowKind::Detail => "detail",
            RowKind::Aggregate => "aggregate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub kind: RowKind,
    pub dataset: String,
    /// Set on detail rows.
    pub seed: Option<u64>,
    pub method: String,
    /// Seeds behind the row (1 for detail rows).
    pub seeds: usize,
    /// Test WIS in response units.
    pub test_wis: f64,
    pub test_wis_se: Option<f64>,
    /// Test WIS over the reference method's (absent when it was not run).
    pub relative_wis: Option<f64>,
    pub relative_wis_se: Option<f64>,
    pub pve: f64,
    /// Per reported α, aligned with [`Report::alphas`].
    pub coverage: Vec<f64>,
    pub length: Vec<f64>,
}

/// The hyperparameters picked on validation WIS for one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningRecord {
    pub dataset: String,
    pub seed: u64,
    pub method: String,
    pub choice: String,
    pub validation_wis: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub alphas: Vec<f64>,
    pub reference_method: String,
    pub rows: Vec<ReportRow>,
    #[serde(default)]
    pub tuning: Vec<TuningRecord>,
}

fn mean_se(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

impl Report {
    /// Builds a report from detail rows, appending aggregate rows in order of
    /// first appearance of each (dataset, method).
    pub fn from_details(
        alphas: Vec<f64>,
        reference_method: &str,
        details: Vec<ReportRow>,
        tuning: Vec<TuningRecord>,
    ) -> Report {
        let details: Vec<ReportRow> = details.into_iter().filter(|r| r.kind == RowKind::Detail).collect();
        let mut keys: Vec<(String, String)> = Vec::new();
        for r in &details {
            let key = (r.dataset.clone(), r.method.clone());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        let mut aggregates = Vec::with_capacity(keys.len());
        for (dataset, method) in keys {
            let cell: Vec<&ReportRow> = details
                .iter()
                .filter(|r| r.dataset == dataset && r.method == method)
                .collect();
            let column = |f: &dyn Fn(&ReportRow) -> f64| mean_se(&cell.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (test_wis, test_wis_se) = column(&|r| r.test_wis);
            let rel: Option<Vec<f64>> = cell.iter().map(|r| r.relative_wis).collect();
            let (relative_wis, relative_wis_se) = match rel {
                Some(v) => {
                    let (m, se) = mean_se(&v);
                    (Some(m), se)
                }
                None => (None, None),
            };
            let (pve, _) = column(&|r| r.pve);
            let per_alpha = |pick: &dyn Fn(&ReportRow) -> &Vec<f64>| -> Vec<f64> {
                (0..alphas.len())
                    .map(|a| mean_se(&cell.iter().map(|r| pick(r)[a]).collect::<Vec<_>>()).0)
                    .collect()
            };
            aggregates.push(ReportRow {
                kind: RowKind::Aggregate,
                dataset,
                seed: None,
                method,
                seeds: cell.len(),
                test_wis,
                test_wis_se,
                relative_wis,
                relative_wis_se,
                pve,
                coverage: per_alpha(&|r| &r.coverage),
                length: per_alpha(&|r| &r.length),
            });
        }
        let mut rows = details;
        rows.extend(aggregates);
        Report {
            alphas,
            reference_method: reference_method.to_string(),
            rows,
            tuning,
        }
    }

    /// Concatenates reports over different datasets (same α list).
    pub fn merge(reports: Vec<Report>) -> Result<Report> {
        let Some(first) = reports.first() else {
            return Err(Error::Data("no reports to merge".into()));
        };
        let (alphas, reference) = (first.alphas.clone(), first.reference_method.clone());
        let mut details = Vec::new();
        let mut tuning = Vec::new();
        for r in reports {
            if r.alphas != alphas {
                return Err(Error::Config("reports use different α lists".into()));
            }
            details.extend(r.rows.into_iter().filter(|row| row.kind == RowKind::Detail));
            tuning.extend(r.tuning);
        }
        Ok(Report::from_details(alphas, &reference, details, tuning))
    }

    pub fn details(&self) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(|r| r.kind == RowKind::Detail)
    }

    pub fn aggregates(&self) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(|r| r.kind == RowKind::Aggregate)
    }

    pub fn aggregate(&self, dataset: &str, method: &str) -> Option<&ReportRow> {
        self.aggregates().find(|r| r.dataset == dataset && r.method == method)
    }

    /// Datasets with `method`'s mean PVE, sorted by increasing PVE.
    pub fn datasets_by_pve(&self, method: &str) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = self
            .aggregates()
            .filter(|r| r.method == method)
            .map(|r| (r.dataset.clone(), r.pve))
            .collect();
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        out
    }

    /// The report as it reads back from CSV: every float at 6 significant digits.
    pub fn rounded(&self) -> Report {
        let r = |v: f64| round_sig(v);
        let o = |v: Option<f64>| v.map(round_sig);
        Report {
            alphas: self.alphas.iter().map(|&a| r(a)).collect(),
            reference_method: self.reference_method.clone(),
            rows: self
                .rows
                .iter()
                .map(|row| ReportRow {
                    test_wis: r(row.test_wis),
                    test_wis_se: o(row.test_wis_se),
                    relative_wis: o(row.relative_wis),
                    relative_wis_se: o(row.relative_wis_se),
                    pve: r(row.pve),
                    coverage: row.coverage.iter().map(|&v| r(v)).collect(),
                    length: row.length.iter().map(|&v| r(v)).collect(),
                    ..row.clone()
                })
                .collect(),
            tuning: self
                .tuning
                .iter()
                .map(|t| TuningRecord {
                    validation_wis: r(t.validation_wis),
                    ..t.clone()
                })
                .collect(),
        }
    }

    fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = [
            "row_type",
            "dataset",
            "seed",
            "method",
            "seeds",
            "test_wis",
            "test_wis_se",
            "relative_wis",
            "relative_wis_se",
            "pve",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for &a in &self.alphas {
            h.push(format!("coverage_{}", fmt_sig(a)));
            h.push(format!("length_{}", fmt_sig(a)));
        }
        h
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.header())?;
        let opt = |v: Option<f64>| v.map(fmt_sig).unwrap_or_default();
        for row in &self.rows {
            let mut rec = vec![
                row.kind.name().to_string(),
                row.dataset.clone(),
                row.seed.map(|s| s.to_string()).unwrap_or_default(),
                row.method.clone(),
                row.seeds.to_string(),
                fmt_sig(row.test_wis),
                opt(row.test_wis_se),
                opt(row.relative_wis),
                opt(row.relative_wis_se),
                fmt_sig(row.pve),
            ];
            for (c, l) in row.coverage.iter().zip(&row.length) {
                rec.push(fmt_sig(*c));
                rec.push(fmt_sig(*l));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a CSV written by [`Report::write_csv`]. Tuning records are not
    /// part of the CSV and come back empty.
    pub fn read_csv(path: &Path, reference_method: &str) -> Result<Report> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let alphas = header
            .iter()
            .filter_map(|h| h.strip_prefix("coverage_"))
            .map(|a| parse_f64(a, "alpha"))
            .collect::<Result<Vec<_>>>()?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("");
            let opt = |i: usize| -> Result<Option<f64>> {
                let s = field(i);
                if s.is_empty() {
                    Ok(None)
                } else {
                    parse_f64(s, header.get(i).unwrap_or("")).map(Some)
                }
            };
            let kind = match field(0) {
                "detail" => RowKind::Detail,
                "aggregate" => RowKind::Aggregate,
                other => return Err(Error::Data(format!("unknown row type `{other}`"))),
            };
            let seed = match field(2) {
                "" => None,
                s => Some(s.parse().map_err(|_| Error::Data(format!("bad seed `{s}`")))?),
            };
            let mut coverage = Vec::with_capacity(alphas.len());
            let mut length = Vec::with_capacity(alphas.len());
            for a in 0..alphas.len() {
                coverage.push(parse_f64(field(10 + 2 * a), "coverage")?);
                length.push(parse_f64(field(11 + 2 * a), "length")?);
            }
            rows.push(ReportRow {
                kind,
                dataset: field(1).to_string(),
                seed,
                method: field(3).to_string(),
                seeds: field(4)
                    .parse()
                    .map_err(|_| Error::Data(format!("bad seed count `{}`", field(4))))?,
                test_wis: parse_f64(field(5), "test_wis")?,
                test_wis_se: opt(6)?,
                relative_wis: opt(7)?,
                relative_wis_se: opt(8)?,
                pve: parse_f64(field(9), "pve")?,
                coverage,
                length,
            });
        }
        Ok(Report {
            alphas,
            reference_method: reference_method.to_string(),
            rows,
            tuning: Vec::new(),
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(f, &self.rounded())?;
        Ok(())
    }
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::Data(format!("cannot parse {what} value `{s}`")))
}

/// `v` rounded to 6 significant digits.
pub fn round_sig(v: f64) -> f64 {
    fmt_sig(v).parse().unwrap_or(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

/// Writes `report.csv` / `report.json` into `dir`, returning the paths.
pub fn emit_report(report: &Report, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for f in formats {
        let path = match f {
            ReportFormat::Csv => dir.join("report.csv"),
            ReportFormat::Json => dir.join("report.json"),
        };
        match f {
            ReportFormat::Csv => report.write_csv(&path)?,
            ReportFormat::Json => report.write_json(&path)?,
        }
        out.push(path);
    }
    Ok(out)
}
