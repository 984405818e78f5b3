//! One-axis sweeps over missing rate, K or variant.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};

use super::config::ExperimentConfig;
use super::train::{run_experiment, MetricsReport};

pub const SWEEP_HEADER: &str = "axis_value,variant,missing_type,missing_rate,acc,auroc,f1_micro,f1_sample,seed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    MissingRate,
    K,
    Variant,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "missing_rate" => Ok(Self::MissingRate),
            "k" | "K" => Ok(Self::K),
            "variant" => Ok(Self::Variant),
            _ => Err(Error::Config(format!(
                "sweep axis must be missing_rate, k or variant, got '{s}'"
            ))),
        }
    }
}

impl SweepAxis {
    fn key(self) -> &'static str {
        match self {
            Self::MissingRate => "missing_rate",
            Self::K => "k",
            Self::Variant => "variant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub axis_value: String,
    pub variant: String,
    pub missing_type: String,
    pub missing_rate: u32,
    pub seed: u64,
    pub report: Option<MetricsReport>,
    /// Set when the cell failed; the sweep carries on.
    pub error: Option<String>,
}

/// Trains and evaluates one run per value. Invalid values and failed runs
/// are recorded in their cell.
pub fn sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[String]) -> Result<Vec<SweepCell>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut cells = Vec::with_capacity(values.len());
    for value in values {
        let mut cfg = base.clone();
        let outcome = cfg.set(axis.key(), value).and_then(|_| run_experiment(&cfg));
        let (report, error) = match outcome {
            Ok(o) => (Some(o.report), None),
            Err(e) => (None, Some(e.to_string())),
        };
        cells.push(SweepCell {
            axis_value: value.clone(),
            variant: cfg.model.variant.to_string(),
            missing_type: cfg.missing_type.to_string(),
            missing_rate: cfg.missing_rate,
            seed: cfg.seed,
            report,
            error,
        });
    }
    Ok(cells)
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// CSV with [`SWEEP_HEADER`]; metrics of failed cells are left empty.
pub fn to_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for c in cells {
        let r = c.report.as_ref();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            c.axis_value,
            c.variant,
            c.missing_type,
            c.missing_rate,
            fmt_metric(r.map(|r| r.accuracy)),
            fmt_metric(r.and_then(|r| r.auroc)),
            fmt_metric(r.map(|r| r.f1_micro)),
            fmt_metric(r.map(|r| r.f1_sample)),
            c.seed
        );
    }
    out
}

pub fn to_json(cells: &[SweepCell]) -> String {
    serde_json::to_string_pretty(cells).expect("sweep cells serialize")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_names() {
        assert_eq!("missing_rate".parse::<SweepAxis>().unwrap(), SweepAxis::MissingRate);
        assert_eq!("K".parse::<SweepAxis>().unwrap(), SweepAxis::K);
        assert!("lr".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn empty_values_rejected_and_bad_cells_recorded() {
        let base = ExperimentConfig::default();
        assert!(sweep(&base, SweepAxis::K, &[]).is_err());
        let cells = sweep(&base, SweepAxis::Variant, &["bogus".to_string()]).unwrap();
        assert!(cells[0].error.is_some());
        let csv = to_csv(&cells);
        assert_eq!(csv.lines().next().unwrap(), SWEEP_HEADER);
        assert_eq!(csv.lines().nth(1).unwrap(), "bogus,full,both,70,,,,,0");
    }
}
