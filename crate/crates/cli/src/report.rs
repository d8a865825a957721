//! Self-contained JSON reports: everything needed to recompute every
//! metric value travels with the ensembles.

use std::collections::BTreeSet;
use std::path::Path;

use cfens_core::data::Enumeration;
use cfens_core::detect::DetectorState;
use cfens_core::evaluate::MethodRun;
use cfens_core::metrics::{measure, AnomalyMetrics, MeasureInputs};
use cfens_core::sample::Forecaster;
use cfens_core::serde_array;
use cfens_core::{Error, Result, Window};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const SCHEMA: &str = "cfens.report/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesInfo {
    pub name: String,
    pub length: usize,
    pub dims: usize,
    /// End of the training part (exclusive).
    pub train_end: usize,
    /// End of the validation part (exclusive); anomalies are taken after it.
    pub val_end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnumerationCounts {
    pub events: usize,
    pub windows: usize,
    pub skipped: usize,
    pub truncated: usize,
    pub overlapping: usize,
}

impl From<&Enumeration> for EnumerationCounts {
    fn from(e: &Enumeration) -> Self {
        Self {
            events: e.events.len(),
            windows: e.windows.len(),
            skipped: e.skipped,
            truncated: e.truncated,
            overlapping: e.overlapping,
        }
    }
}

/// The detector as used: built-in state, or the external command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorInfo {
    Builtin(DetectorState),
    External { command: Vec<String> },
}

/// One explained anomaly, shared by every method run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyEntry {
    pub window: Window,
    /// Median forecast the first implausibility is measured against.
    #[serde(with = "serde_array::matrix_opt")]
    pub reference: Option<Array2<f64>>,
    /// Injected channels of the overlapping ground-truth event.
    pub true_dims: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub command: String,
    pub config: RunConfig,
    pub series: SeriesInfo,
    pub detector: DetectorInfo,
    pub forecaster: Option<Forecaster>,
    pub enumeration: EnumerationCounts,
    pub anomalies: Vec<AnomalyEntry>,
    pub runs: Vec<MethodRun>,
}

impl Report {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = crate::commands::read_text(path.as_ref())?;
        let report: Report = serde_json::from_str(&text)?;
        if report.schema != SCHEMA {
            return Err(Error::invalid(
                "schema",
                format!("expected {SCHEMA}, found {}", report.schema),
            ));
        }
        Ok(report)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn run(&self, method: cfens_core::Method) -> Result<&MethodRun> {
        self.runs
            .iter()
            .find(|r| r.method == method)
            .ok_or_else(|| Error::invalid("method", format!("{method} is not part of this report")))
    }

    /// Metric rows recomputed from the stored windows, references and
    /// ensembles, in the layout of `runs`.
    pub fn recompute(&self) -> Result<Vec<Vec<AnomalyMetrics>>> {
        self.runs
            .iter()
            .map(|run| {
                if run.results.len() != self.anomalies.len() {
                    return Err(Error::shape(self.anomalies.len(), run.results.len()));
                }
                run.results
                    .iter()
                    .zip(&self.anomalies)
                    .map(|(r, a)| {
                        let dims: Option<BTreeSet<usize>> = a.true_dims.as_ref().map(|d| d.iter().copied().collect());
                        measure(
                            &r.ensemble,
                            &a.window,
                            MeasureInputs {
                                reference: a.reference.as_ref().map(|m| m.view()),
                                forecaster: self.forecaster.as_ref(),
                                true_dims: dims.as_ref(),
                                rejection_rate: r.metrics.rejection_rate,
                            },
                        )
                    })
                    .collect()
            })
            .collect()
    }

    /// Largest absolute difference between stored and recomputed metric
    /// values; infinite when the layouts disagree.
    pub fn max_metric_deviation(&self) -> Result<f64> {
        let fresh = self.recompute()?;
        let mut worst: f64 = 0.0;
        for (run, rows) in self.runs.iter().zip(&fresh) {
            for (stored, new) in run.results.iter().map(|r| &r.metrics).zip(rows) {
                worst = worst.max(row_deviation(stored, new));
            }
        }
        Ok(worst)
    }
}

fn vec_deviation(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn row_deviation(a: &AnomalyMetrics, b: &AnomalyMetrics) -> f64 {
    if a.start != b.start || a.members != b.members {
        return f64::INFINITY;
    }
    let opt_vec = match (&a.implausibility3, &b.implausibility3) {
        (Some(x), Some(y)) => vec_deviation(x, y),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    };
    let sparsity = match (a.sparsity, b.sparsity) {
        (Some(x), Some(y)) => (x.0 - y.0).abs().max((x.1 - y.1).abs()),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    };
    [
        vec_deviation(&a.distance, &b.distance),
        vec_deviation(&a.implausibility1, &b.implausibility1),
        vec_deviation(&a.implausibility2, &b.implausibility2),
        opt_vec,
        sparsity,
        (a.diversity - b.diversity).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}
