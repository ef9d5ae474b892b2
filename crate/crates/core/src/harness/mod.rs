//! Experiment orchestration: data handling, splits, tuning and reports.

mod data;
mod experiment;
mod report;
pub mod synthetic;

pub use data::{ingest_csv, split_indices, Dataset, Rejection, Split, Standardization};
pub use experiment::{
    fit_base_models, fit_ensemble, prepare_split, run_experiment, tune_base_models, BaseBundle, BaseFamily,
    EnsembleBundle, ExperimentConfig, Method, PreparedSplit,
};
pub use report::{emit_report, round_sig, Report, ReportFormat, ReportRow, RowKind, TuningRecord};
pub use synthetic::{generate, true_quantiles, SyntheticKind};

/// Formats a float with 6 significant digits (`NaN`, `inf` and `-inf` verbatim).
pub fn fmt_sig(v: f64) -> String {
    if !v.is_finite() {
        return if v.is_nan() { "NaN".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let rounded: f64 = format!("{:.5e}", v).parse().unwrap_or(v);
    let mag = rounded.abs();
    if mag != 0.0 && !(1e-4..1e15).contains(&mag) {
        format!("{rounded:e}")
    } else {
        format!("{rounded}")
    }
}

#[cfg(test)]
mod tests {
    use super::fmt_sig;

    #[test]
    fn six_significant_digits() {
        assert_eq!(fmt_sig(0.812345678), "0.812346");
        assert_eq!(fmt_sig(123456789.0), "123457000");
        assert_eq!(fmt_sig(3.916e-16), "3.916e-16");
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(f64::NEG_INFINITY), "-inf");
        assert_eq!(fmt_sig(f64::NAN), "NaN");
    }
}
