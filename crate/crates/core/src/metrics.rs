//! Explainability metrics per ensemble, and their aggregation across
//! anomalies into a report.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::Forecaster;
use crate::types::{Ensemble, Method, Window};

/// Threshold on a selector entry above which the dimension counts as
/// perturbed.
pub const SELECTOR_THRESHOLD: f64 = 0.5;

/// Dynamic time warping with Euclidean point costs over the full lattice.
pub fn dtw(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::EmptySequence);
    }
    if a.ncols() != b.ncols() {
        return Err(Error::shape(format!("{} dimensions", a.ncols()), b.ncols()));
    }
    let (n, m) = (a.nrows(), b.nrows());
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let cost = a
                .row(i - 1)
                .iter()
                .zip(b.row(j - 1))
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            cur[j] = cost + prev[j - 1].min(prev[j]).min(cur[j - 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and population standard deviation; `None` for no values.
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Stat { mean, std: var.sqrt() })
    }

    fn pair(self) -> (f64, f64) {
        (self.mean, self.std)
    }
}

fn per_member<F>(ensemble: &Ensemble, f: F) -> Result<Vec<f64>>
where
    F: Fn(ArrayView2<f64>) -> Result<f64>,
{
    if ensemble.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    ensemble.suspects().map(|s| f(s.view())).collect()
}

fn summarize(values: Vec<f64>) -> (f64, f64) {
    Stat::of(&values).expect("non-empty").pair()
}

pub fn distances(ensemble: &Ensemble, suspect: ArrayView2<f64>) -> Result<Vec<f64>> {
    per_member(ensemble, |m| dtw(m, suspect))
}

/// DTW closeness to the original suspect segment.
pub fn distance_metric(ensemble: &Ensemble, suspect: ArrayView2<f64>) -> Result<(f64, f64)> {
    distances(ensemble, suspect).map(summarize)
}

/// DTW distance to a plausible reference segment.
pub fn implausibility1(ensemble: &Ensemble, reference: ArrayView2<f64>) -> Result<(f64, f64)> {
    distances(ensemble, reference).map(summarize)
}

/// Unnormalized total variation along time, summed over dimensions.
pub fn temporal_variation(x: ArrayView2<f64>) -> f64 {
    x.axis_windows(Axis(0), 2)
        .into_iter()
        .map(|w| w.row(1).iter().zip(w.row(0)).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .sum()
}

pub fn implausibility2_values(ensemble: &Ensemble) -> Result<Vec<f64>> {
    per_member(ensemble, |m| Ok(temporal_variation(m)))
}

pub fn implausibility2(ensemble: &Ensemble) -> Result<(f64, f64)> {
    implausibility2_values(ensemble).map(summarize)
}

pub fn implausibility3_values(ensemble: &Ensemble, g: &Forecaster, context: ArrayView2<f64>) -> Result<Vec<f64>> {
    per_member(ensemble, |m| g.nll(context, m))
}

/// Mean negative log-likelihood under the forecaster.
pub fn implausibility3(ensemble: &Ensemble, g: &Forecaster, context: ArrayView2<f64>) -> Result<(f64, f64)> {
    implausibility3_values(ensemble, g, context).map(summarize)
}

/// Population variance across members at every (timestamp, dimension),
/// averaged over cells. Empty and singleton ensembles have zero diversity.
pub fn diversity(ensemble: &Ensemble) -> f64 {
    let Some(first) = ensemble.members.first() else {
        return 0.0;
    };
    let n = ensemble.len() as f64;
    let mut mean = Array2::<f64>::zeros(first.suspect.raw_dim());
    for s in ensemble.suspects() {
        mean += s;
    }
    mean /= n;
    let mut var = Array2::<f64>::zeros(first.suspect.raw_dim());
    for s in ensemble.suspects() {
        var += &(s - &mean).mapv(|v| v * v);
    }
    var /= n;
    var.mean().unwrap_or(0.0)
}

/// Dimensions whose selector entry exceeds [`SELECTOR_THRESHOLD`].
pub fn perturbed_dims(selector: &Array1<f64>) -> BTreeSet<usize> {
    selector
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > SELECTOR_THRESHOLD)
        .map(|(d, _)| d)
        .collect()
}

/// Precision and recall of the selected dimensions. An empty selection
/// scores `(0, 0)`.
pub fn sparsity_pr(perturbed: &BTreeSet<usize>, truth: Option<&BTreeSet<usize>>) -> Result<(f64, f64)> {
    let truth = match truth {
        Some(t) if !t.is_empty() => t,
        _ => return Err(Error::NoGroundTruth),
    };
    if perturbed.is_empty() {
        return Ok((0.0, 0.0));
    }
    let hits = perturbed.intersection(truth).count() as f64;
    Ok((hits / perturbed.len() as f64, hits / truth.len() as f64))
}

/// Per-anomaly metric values, one entry per ensemble member where
/// applicable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyMetrics {
    pub start: usize,
    pub members: usize,
    /// Sampling methods only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejection_rate: Option<f64>,
    pub distance: Vec<f64>,
    pub implausibility1: Vec<f64>,
    pub implausibility2: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub implausibility3: Option<Vec<f64>>,
    pub diversity: f64,
    /// Precision and recall, averaged over members (sparse methods with
    /// ground truth only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<(f64, f64)>,
}

/// Optional inputs for [`measure`].
#[derive(Debug, Clone, Copy, Default)]
pub struct MeasureInputs<'a> {
    /// Reference segment for Implausibility 1.
    pub reference: Option<ArrayView2<'a, f64>>,
    pub forecaster: Option<&'a Forecaster>,
    pub true_dims: Option<&'a BTreeSet<usize>>,
    pub rejection_rate: Option<f64>,
}

/// Every metric for one anomaly's ensemble. Empty ensembles produce empty
/// member lists and count as failures.
pub fn measure(ensemble: &Ensemble, window: &Window, inputs: MeasureInputs<'_>) -> Result<AnomalyMetrics> {
    let mut row = AnomalyMetrics {
        start: window.origin.start,
        members: ensemble.len(),
        rejection_rate: inputs.rejection_rate,
        distance: Vec::new(),
        implausibility1: Vec::new(),
        implausibility2: Vec::new(),
        implausibility3: inputs.forecaster.map(|_| Vec::new()),
        diversity: 0.0,
        sparsity: None,
    };
    if ensemble.is_empty() {
        return Ok(row);
    }
    row.distance = distances(ensemble, window.suspect.view())?;
    if let Some(reference) = inputs.reference {
        row.implausibility1 = distances(ensemble, reference)?;
    }
    row.implausibility2 = implausibility2_values(ensemble)?;
    if let Some(g) = inputs.forecaster {
        row.implausibility3 = Some(implausibility3_values(ensemble, g, window.context.view())?);
    }
    row.diversity = diversity(ensemble);
    if ensemble.method.is_sparse() {
        if let Some(truth) = inputs.true_dims {
            let mut p = 0.0;
            let mut r = 0.0;
            let mut n = 0.0;
            for m in &ensemble.members {
                if let Some(w) = &m.selector {
                    let (pm, rm) = sparsity_pr(&perturbed_dims(w), Some(truth))?;
                    p += pm;
                    r += rm;
                    n += 1.0;
                }
            }
            if n > 0.0 {
                row.sparsity = Some((p / n, r / n));
            }
        }
    }
    Ok(row)
}

/// Fraction of empty ensembles for gradient methods, mean rejection rate
/// for sampling methods.
pub fn failure_rate(rows: &[AnomalyMetrics], method: Method) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let n = rows.len() as f64;
    if method.is_gradient() {
        rows.iter().filter(|r| r.members == 0).count() as f64 / n
    } else {
        rows.iter().map(|r| r.rejection_rate.unwrap_or(1.0)).sum::<f64>() / n
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: Method,
    pub anomalies: usize,
    pub members: usize,
    pub failure_rate: f64,
    pub distance: Option<Stat>,
    pub implausibility1: Option<Stat>,
    pub implausibility2: Option<Stat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub implausibility3: Option<Stat>,
    pub diversity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<Sparsity>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sparsity {
    pub precision: f64,
    pub recall: f64,
}

/// Pools member-level values across anomalies, so every counterfactual
/// counts once. Diversity is member-weighted; sparsity is averaged over
/// anomalies that report it.
pub fn aggregate_report(method: Method, rows: &[AnomalyMetrics]) -> MetricReport {
    let pool = |f: fn(&AnomalyMetrics) -> &[f64]| -> Option<Stat> {
        let all: Vec<f64> = rows.iter().flat_map(|r| f(r).iter().copied()).collect();
        Stat::of(&all)
    };
    let members: usize = rows.iter().map(|r| r.members).sum();
    let impl3 = if rows.iter().any(|r| r.implausibility3.is_some()) {
        let all: Vec<f64> = rows
            .iter()
            .filter_map(|r| r.implausibility3.as_ref())
            .flatten()
            .copied()
            .collect();
        Stat::of(&all)
    } else {
        None
    };
    let diversity = (members > 0)
        .then(|| rows.iter().map(|r| r.diversity * r.members as f64).sum::<f64>() / members as f64);
    let sp: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.sparsity).collect();
    let sparsity = (!sp.is_empty()).then(|| Sparsity {
        precision: sp.iter().map(|s| s.0).sum::<f64>() / sp.len() as f64,
        recall: sp.iter().map(|s| s.1).sum::<f64>() / sp.len() as f64,
    });
    MetricReport {
        method,
        anomalies: rows.len(),
        members,
        failure_rate: failure_rate(rows, method),
        distance: pool(|r| &r.distance),
        implausibility1: pool(|r| &r.implausibility1),
        implausibility2: pool(|r| &r.implausibility2),
        implausibility3: impl3,
        diversity,
        sparsity,
    }
}

/// Aligned plain-text table, one row per method, `mean (std)` cells.
pub fn render_table(reports: &[MetricReport]) -> String {
    let stat = |s: Option<Stat>| s.map_or("-".to_string(), |s| format!("{:.3} ({:.3})", s.mean, s.std));
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
    let header = [
        "Method",
        "Failure (%)",
        "Distance",
        "Implausibility 1",
        "Implausibility 2",
        "Implausibility 3",
        "Diversity",
        "Precision",
        "Recall",
    ];
    let rows: Vec<[String; 9]> = reports
        .iter()
        .map(|r| {
            [
                r.method.to_string(),
                format!("{:.1}", 100.0 * r.failure_rate),
                stat(r.distance),
                stat(r.implausibility1),
                stat(r.implausibility2),
                stat(r.implausibility3),
                opt(r.diversity),
                opt(r.sparsity.map(|s| s.precision)),
                opt(r.sparsity.map(|s| s.recall)),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &mut dyn Iterator<Item = &str>| {
        let parts: Vec<String> = cells.zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, &mut header.iter().copied());
    let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
    let _ = writeln!(out, "{}", "-".repeat(total));
    for row in &rows {
        line(&mut out, &mut row.iter().map(String::as_str));
    }
    out
}
