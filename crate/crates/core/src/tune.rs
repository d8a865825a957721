//! Grid search over the gradient explainers' hyperparameters: the winner
//! has minimal mean Implausibility 2 among configurations whose failure
//! rate stays under a threshold.

use std::path::Path;

use ndarray::Array2;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::{run_method, splitmix64, Setup};
use crate::types::{HyperParams, Method, Window};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    /// Shared values for `lambda1 = lambda2`.
    pub lambda_joint: Vec<f64>,
    #[serde(rename = "lambdaT")]
    pub lambda_t: Vec<f64>,
    /// Only varied for the blur-based methods.
    pub sigma_max: Vec<f64>,
    pub learning_rate: Vec<f64>,
    pub failure_threshold: f64,
    pub sample_size: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            lambda_joint: vec![0.001, 0.01, 0.1, 1.0],
            lambda_t: vec![0.001, 0.01, 0.1, 1.0],
            sigma_max: vec![3.0, 5.0, 10.0],
            learning_rate: vec![0.01, 0.1, 1.0, 10.0, 1000.0, 10000.0],
            failure_threshold: 0.10,
            sample_size: 100,
        }
    }
}

/// One grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lambda_joint: f64,
    #[serde(rename = "lambdaT")]
    pub lambda_t: f64,
    pub sigma_max: f64,
    pub learning_rate: f64,
}

impl GridPoint {
    pub fn apply(&self, base: &HyperParams) -> HyperParams {
        HyperParams {
            lambda1: self.lambda_joint,
            lambda2: self.lambda_joint,
            lambda_t: self.lambda_t,
            sigma_max: self.sigma_max,
            learning_rate: self.learning_rate,
            ..base.clone()
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let lists = [
            ("lambda_joint", &self.lambda_joint),
            ("lambdaT", &self.lambda_t),
            ("sigma_max", &self.sigma_max),
            ("learning_rate", &self.learning_rate),
        ];
        for (name, values) in lists {
            if values.is_empty() {
                return Err(Error::invalid(name, "grid axis is empty"));
            }
            if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::invalid(name, "grid values must be finite and >= 0"));
            }
        }
        if self.learning_rate.iter().any(|&v| v <= 0.0) {
            return Err(Error::invalid("learning_rate", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.failure_threshold) {
            return Err(Error::invalid("failure_threshold", "must lie in [0, 1]"));
        }
        if self.sample_size == 0 {
            return Err(Error::invalid("sample_size", "must be >= 1"));
        }
        Ok(())
    }

    /// Grid points in enumeration order: lambda_joint, lambdaT, sigma_max,
    /// learning rate (innermost).
    pub fn points(&self, method: Method, base: &HyperParams) -> Vec<GridPoint> {
        let sigmas = if method.uses_blur() {
            self.sigma_max.clone()
        } else {
            vec![base.sigma_max]
        };
        let mut out = Vec::new();
        for &lambda_joint in &self.lambda_joint {
            for &lambda_t in &self.lambda_t {
                for &sigma_max in &sigmas {
                    for &learning_rate in &self.learning_rate {
                        out.push(GridPoint {
                            lambda_joint,
                            lambda_t,
                            sigma_max,
                            learning_rate,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub index: usize,
    #[serde(flatten)]
    pub point: GridPoint,
    pub failure_rate: f64,
    /// Mean over all members; absent when every anomaly failed.
    pub implausibility1: Option<f64>,
    pub implausibility2: Option<f64>,
    pub feasible: bool,
}

/// The selection rule on `(failure rate, mean Implausibility 2)` pairs:
/// minimal Implausibility 2 among rows with failure at most `threshold`;
/// without any such row, minimal failure then minimal Implausibility 2.
/// Remaining ties go to the earliest row. `None` only for no rows.
pub fn select(rows: &[(f64, Option<f64>)], threshold: f64) -> Option<usize> {
    let impl2 = |i: usize| rows[i].1.unwrap_or(f64::INFINITY);
    let by = |a: &usize, b: &usize, key: &dyn Fn(usize) -> (f64, f64)| {
        let (ka, kb) = (key(*a), key(*b));
        ka.0.total_cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then(a.cmp(b))
    };
    let feasible: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].0 <= threshold).collect();
    if !feasible.is_empty() {
        return feasible
            .into_iter()
            .min_by(|a, b| by(a, b, &|i| (impl2(i), 0.0)));
    }
    (0..rows.len()).min_by(|a, b| by(a, b, &|i| (rows[i].0, impl2(i))))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub method: Method,
    pub best: HyperParams,
    pub selected: usize,
    pub leaderboard: Vec<LeaderboardEntry>,
    /// Suspect start of every anomaly the grid was evaluated on.
    pub anomalies: Vec<usize>,
}

/// Seeded uniform subsample of at most `k` of `n` indices, in increasing
/// order.
pub fn subsample_anomalies(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x7475_6e65));
    let mut picked = index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    picked
}

/// Evaluate every grid point on a shared anomaly subsample and apply
/// [`select`].
pub fn grid_search(
    setup: &Setup<'_>,
    windows: &[Window],
    references: &[Option<Array2<f64>>],
    method: Method,
    base: &HyperParams,
    grid: &GridSpec,
) -> Result<TuneOutcome> {
    grid.validate()?;
    if !method.is_gradient() {
        return Err(Error::invalid("method", format!("{method} has no tunable hyperparameters")));
    }
    if windows.is_empty() {
        return Err(Error::invalid("windows", "no anomalies to tune on"));
    }
    if references.len() != windows.len() {
        return Err(Error::shape(windows.len(), references.len()));
    }
    let picked = subsample_anomalies(windows.len(), grid.sample_size, setup.seed);
    let sub_windows: Vec<Window> = picked.iter().map(|&i| windows[i].clone()).collect();
    let sub_refs: Vec<Option<Array2<f64>>> = picked.iter().map(|&i| references[i].clone()).collect();
    let setup = Setup {
        keep_traces: false,
        ..*setup
    };

    let points = grid.points(method, base);
    let leaderboard: Vec<LeaderboardEntry> = points
        .par_iter()
        .enumerate()
        .map(|(index, point)| {
            let hp = point.apply(base);
            let run = run_method(&setup, &sub_windows, &sub_refs, method, &hp)?;
            Ok(LeaderboardEntry {
                index,
                point: *point,
                failure_rate: run.report.failure_rate,
                implausibility1: run.report.implausibility1.map(|s| s.mean),
                implausibility2: run.report.implausibility2.map(|s| s.mean),
                feasible: run.report.failure_rate <= grid.failure_threshold,
            })
        })
        .collect::<Result<_>>()?;

    let rows: Vec<(f64, Option<f64>)> = leaderboard
        .iter()
        .map(|e| (e.failure_rate, e.implausibility2))
        .collect();
    let selected = select(&rows, grid.failure_threshold).expect("grid is non-empty");
    Ok(TuneOutcome {
        method,
        best: points[selected].apply(base),
        selected,
        leaderboard,
        anomalies: sub_windows.iter().map(|w| w.origin.start).collect(),
    })
}

pub fn write_leaderboard_csv(path: impl AsRef<Path>, entries: &[LeaderboardEntry]) -> Result<()> {
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record([
        "index",
        "lambda_joint",
        "lambdaT",
        "sigma_max",
        "learning_rate",
        "failure_rate",
        "implausibility1",
        "implausibility2",
        "feasible",
    ])
    .map_err(io)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for e in entries {
        w.write_record([
            e.index.to_string(),
            e.point.lambda_joint.to_string(),
            e.point.lambda_t.to_string(),
            e.point.sigma_max.to_string(),
            e.point.learning_rate.to_string(),
            e.failure_rate.to_string(),
            opt(e.implausibility1),
            opt(e.implausibility2),
            e.feasible.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_point_always_wins() {
        assert_eq!(select(&[(0.9, None)], 0.1), Some(0));
        assert_eq!(select(&[], 0.1), None);
    }

    #[test]
    fn feasibility_filter_comes_first() {
        assert_eq!(select(&[(0.05, Some(10.0)), (0.5, Some(0.1))], 0.1), Some(0));
        assert_eq!(select(&[(0.05, Some(10.0)), (0.1, Some(0.1))], 0.1), Some(1));
    }

    #[test]
    fn infeasible_fallback_and_ties() {
        assert_eq!(select(&[(0.5, Some(1.0)), (0.3, Some(9.0)), (0.3, Some(2.0))], 0.1), Some(2));
        assert_eq!(select(&[(0.0, Some(1.0)), (0.0, Some(1.0))], 0.1), Some(0));
        assert_eq!(select(&[(0.0, None), (0.05, Some(3.0))], 0.1), Some(1));
    }

    #[test]
    fn grid_order_and_size() {
        let g = GridSpec::default();
        let base = HyperParams::default();
        assert_eq!(g.points(Method::Ice, &base).len(), 4 * 4 * 6);
        let dpe = g.points(Method::Dpe, &base);
        assert_eq!(dpe.len(), 4 * 4 * 3 * 6);
        assert_eq!(dpe[1].learning_rate, 0.1);
        assert_eq!(dpe[6].sigma_max, 5.0);
        let bad = GridSpec {
            learning_rate: vec![],
            ..GridSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn grid_spec_rejects_unknown_keys() {
        assert!(serde_json::from_str::<GridSpec>(r#"{"lambda_joint":[0.1],"bogus":1}"#).is_err());
        let g: GridSpec = serde_json::from_str(r#"{"lambdaT":[0.5]}"#).unwrap();
        assert_eq!(g.lambda_t, vec![0.5]);
        assert_eq!(g.sample_size, 100);
    }

    proptest! {
        #[test]
        fn select_matches_exhaustive_rule(rows in proptest::collection::vec((0.0f64..1.0, proptest::option::of(0.0f64..5.0)), 1..20), th in 0.0f64..1.0) {
            let got = select(&rows, th).unwrap();
            let key = |i: usize| rows[i].1.unwrap_or(f64::INFINITY);
            let feasible: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].0 <= th).collect();
            let expect = if feasible.is_empty() {
                let mut best = 0;
                for i in 1..rows.len() {
                    if (rows[i].0, key(i)) < (rows[best].0, key(best)) {
                        best = i;
                    }
                }
                best
            } else {
                let mut best = feasible[0];
                for &i in &feasible[1..] {
                    if key(i) < key(best) {
                        best = i;
                    }
                }
                best
            };
            prop_assert_eq!(got, expect);
        }

        #[test]
        fn subsample_is_sorted_unique(n in 1usize..200, k in 1usize..50, seed in any::<u64>()) {
            let s = subsample_anomalies(n, k, seed);
            prop_assert_eq!(s.len(), k.min(n));
            prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(s.iter().all(|&i| i < n));
            prop_assert_eq!(s, subsample_anomalies(n, k, seed));
        }
    }
}
