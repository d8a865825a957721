//! The evaluation protocol: detect anomalies on the test part, enumerate
//! their windows once, then run every explainer on the same windows with
//! per-anomaly random streams and a shared plausibility reference.

use std::collections::BTreeSet;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{enumerate_anomaly_windows, Enumeration, GroundTruth, Mode};
use crate::detect::{score_series, Detector};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_report, measure, AnomalyMetrics, MeasureInputs, MetricReport};
use crate::optimize::{explain, Trace};
use crate::sample::{explain_fs, explain_naive, median_reference, Forecaster};
use crate::types::{DetectionRule, Ensemble, HyperParams, Method, TimeSeries, Window};

/// SplitMix64 finalizer, used to fan one seed out into independent streams.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the random stream for the anomaly whose suspect starts at
/// `start`. Keyed by position, so results do not depend on which other
/// anomalies are evaluated alongside.
pub fn anomaly_seed(seed: u64, start: usize) -> u64 {
    splitmix64(splitmix64(seed) ^ start as u64)
}

#[derive(Debug, Clone)]
pub struct Detection {
    pub scores: Vec<f64>,
    pub predicted: Vec<u8>,
    pub enumeration: Enumeration,
}

/// Score every timestamp, threshold, and enumerate windows for events that
/// start at or after `from`.
pub fn detect_windows<D: Detector + ?Sized>(
    det: &D,
    rule: &DetectionRule,
    series: &TimeSeries,
    mode: Mode,
    suspect_len: usize,
    context_len: usize,
    from: usize,
) -> Result<Detection> {
    let scores = score_series(det, series, suspect_len, context_len)?;
    let predicted: Vec<u8> = scores.iter().map(|&s| u8::from(rule.is_anomalous(s))).collect();
    let mut restricted = predicted.clone();
    restricted[..from.min(series.len())].fill(0);
    let enumeration = enumerate_anomaly_windows(series, &restricted, mode, suspect_len, context_len)?;
    Ok(Detection {
        scores,
        predicted,
        enumeration,
    })
}

/// Everything shared by the methods of one evaluation.
#[derive(Clone, Copy)]
pub struct Setup<'a> {
    pub detector: &'a dyn Detector,
    pub rule: DetectionRule,
    pub forecaster: Option<&'a Forecaster>,
    pub truth: Option<&'a GroundTruth>,
    /// Draws per anomaly for the sampling explainers and the reference.
    pub samples: usize,
    pub seed: u64,
    pub keep_traces: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnomalyResult {
    pub ensemble: Ensemble,
    pub metrics: AnomalyMetrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Trace>,
    /// Set when the optimizer diverged; the anomaly counts as a failure.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diverged_at: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodRun {
    pub method: Method,
    pub hyperparams: Option<HyperParams>,
    pub results: Vec<AnomalyResult>,
    pub report: MetricReport,
}

/// Pointwise median of the forecaster's samples for each window, the
/// target of Implausibility 1. `None` everywhere without a forecaster.
pub fn references(setup: &Setup<'_>, windows: &[Window]) -> Result<Vec<Option<Array2<f64>>>> {
    let Some(g) = setup.forecaster else {
        return Ok(vec![None; windows.len()]);
    };
    windows
        .par_iter()
        .map(|w| {
            let seed = anomaly_seed(setup.seed, w.origin.start);
            let samples = g.sample_paths(w.context.view(), w.suspect_len(), setup.samples, seed)?;
            median_reference(&samples).map(Some)
        })
        .collect()
}

fn true_dims(truth: Option<&GroundTruth>, w: &Window) -> Option<BTreeSet<usize>> {
    truth
        .and_then(|t| t.event_overlapping(w.origin.start, w.suspect_len()))
        .map(|e| e.channels.iter().copied().collect())
}

fn run_one(
    setup: &Setup<'_>,
    window: &Window,
    reference: Option<&Array2<f64>>,
    method: Method,
    hp: &HyperParams,
) -> Result<AnomalyResult> {
    let seed = anomaly_seed(setup.seed, window.origin.start);
    let mut trace = None;
    let mut diverged_at = None;
    let mut rejection_rate = None;
    let ensemble = match method {
        Method::Fs => {
            let g = setup
                .forecaster
                .ok_or_else(|| Error::invalid("method", "fs needs a fitted forecaster"))?;
            let out = explain_fs(setup.detector, &setup.rule, g, window, setup.samples, seed)?;
            rejection_rate = Some(out.rejection_rate);
            out.ensemble
        }
        Method::Naive => {
            let out = explain_naive(setup.detector, &setup.rule, window, setup.samples, seed)?;
            rejection_rate = Some(out.rejection_rate);
            out.ensemble
        }
        _ => match explain(setup.detector, &setup.rule, window, method, hp) {
            Ok((ensemble, t)) => {
                trace = setup.keep_traces.then_some(t);
                ensemble
            }
            Err(Error::NonFiniteLoss { iteration, trace: t }) => {
                diverged_at = Some(iteration);
                trace = setup.keep_traces.then_some(*t);
                Ensemble::empty(method)
            }
            Err(e) => return Err(e),
        },
    };
    let dims = true_dims(setup.truth, window);
    let metrics = measure(
        &ensemble,
        window,
        MeasureInputs {
            reference: reference.map(|r| r.view()),
            forecaster: setup.forecaster,
            true_dims: dims.as_ref(),
            rejection_rate,
        },
    )?;
    Ok(AnomalyResult {
        ensemble,
        metrics,
        trace,
        diverged_at,
    })
}

/// Run one method over every window (in parallel, merged in window order).
pub fn run_method(
    setup: &Setup<'_>,
    windows: &[Window],
    references: &[Option<Array2<f64>>],
    method: Method,
    hp: &HyperParams,
) -> Result<MethodRun> {
    if references.len() != windows.len() {
        return Err(Error::shape(windows.len(), references.len()));
    }
    let results: Vec<AnomalyResult> = windows
        .par_iter()
        .zip(references.par_iter())
        .map(|(w, r)| run_one(setup, w, r.as_ref(), method, hp))
        .collect::<Result<_>>()?;
    let rows: Vec<AnomalyMetrics> = results.iter().map(|r| r.metrics.clone()).collect();
    Ok(MethodRun {
        method,
        hyperparams: method.is_gradient().then(|| hp.clone()),
        report: aggregate_report(method, &rows),
        results,
    })
}
