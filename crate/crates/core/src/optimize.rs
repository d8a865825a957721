//! Projected gradient descent over each explainer variant's variables.
//!
//! Every iteration takes one full-gradient step, clamps box-constrained
//! variables (`M`, `w`, `t`) back into `[0, 1]`, re-scores the resulting
//! candidate and stores it if it is valid. The final ensemble is a regular
//! grid over the generation rank of the stored candidates.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::detect::Detector;
use crate::error::{Error, Result};
use crate::objective::{loss_dpe, loss_ice, loss_sparse_dpe, loss_sparse_ice, LossBreakdown};
use crate::perturb::{apply_map, mix_sparse, outer_map, project_box_all, project_box_vec};
use crate::types::{is_valid, DetectionRule, Ensemble, HyperParams, Member, Method, Window};

/// Starting blur strength of every DPE map entry.
///
/// The blur bandwidth is `sigma_max * M`, and all derivatives of the blurred
/// values vanish at `M = 0`, so a map started exactly at zero never moves.
/// A small uniform strength keeps the start close to the original window.
pub const DPE_INITIAL_STRENGTH: f64 = 0.1;

/// Starting value of the sparse variants' selector `w` (and time profile
/// `t`). At `w = 0` every gradient of the prediction term is blocked.
pub const SPARSE_INITIAL_SELECTOR: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub loss: LossBreakdown,
    pub valid: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<IterationRecord>,
    /// Every valid candidate, ranks strictly increasing.
    pub candidates: Vec<Member>,
}

enum State {
    Ice { cand: Array2<f64> },
    Dpe { map: Array2<f64> },
    SparseIce { w: Array1<f64>, z: Array2<f64> },
    SparseDpe { w: Array1<f64>, t: Array1<f64> },
}

impl State {
    fn init(method: Method, window: &Window) -> Result<Self> {
        let (s, d) = window.suspect.dim();
        Ok(match method {
            Method::Ice => State::Ice {
                cand: window.suspect.clone(),
            },
            Method::Dpe => State::Dpe {
                map: Array2::from_elem((s, d), DPE_INITIAL_STRENGTH),
            },
            Method::SparseIce => State::SparseIce {
                w: Array1::from_elem(d, SPARSE_INITIAL_SELECTOR),
                z: window.suspect.clone(),
            },
            Method::SparseDpe => State::SparseDpe {
                w: Array1::from_elem(d, SPARSE_INITIAL_SELECTOR),
                t: Array1::from_elem(s, SPARSE_INITIAL_SELECTOR),
            },
            Method::Fs | Method::Naive => {
                return Err(Error::invalid(
                    "method",
                    format!("`{method}` is not a gradient explainer"),
                ))
            }
        })
    }

    /// One projected gradient step; returns the loss before the step.
    fn step<D: Detector + ?Sized>(
        &mut self,
        window: &Window,
        hp: &HyperParams,
        det: &D,
    ) -> Result<LossBreakdown> {
        let lr = hp.learning_rate;
        Ok(match self {
            State::Ice { cand } => {
                let (loss, g) = loss_ice(window, cand.view(), hp, det)?;
                cand.scaled_add(-lr, &g);
                loss
            }
            State::Dpe { map } => {
                let (loss, g) = loss_dpe(window, map.view(), hp, det)?;
                map.scaled_add(-lr, &g);
                project_box_all(map);
                loss
            }
            State::SparseIce { w, z } => {
                let (loss, gw, gz) = loss_sparse_ice(window, w.view(), z.view(), hp, det)?;
                w.scaled_add(-lr, &gw);
                project_box_vec(w);
                z.scaled_add(-lr, &gz);
                loss
            }
            State::SparseDpe { w, t } => {
                let (loss, gw, gt) = loss_sparse_dpe(window, w.view(), t.view(), hp, det)?;
                w.scaled_add(-lr, &gw);
                t.scaled_add(-lr, &gt);
                project_box_vec(w);
                project_box_vec(t);
                loss
            }
        })
    }

    /// Current perturbed suspect window, map and selector.
    fn candidate(&self, window: &Window, hp: &HyperParams) -> (Array2<f64>, Option<Array2<f64>>, Option<Array1<f64>>) {
        match self {
            State::Ice { cand } => (cand.clone(), None, None),
            State::Dpe { map } => (apply_map(window, map.view(), hp.sigma_max), Some(map.clone()), None),
            State::SparseIce { w, z } => (mix_sparse(window.suspect.view(), w.view(), z.view()), None, Some(w.clone())),
            State::SparseDpe { w, t } => {
                let map = outer_map(w.view(), t.view());
                (apply_map(window, map.view(), hp.sigma_max), Some(map), Some(w.clone()))
            }
        }
    }
}

/// Run one gradient explainer on one window.
///
/// Fails with [`Error::NonFiniteLoss`] (carrying the trace so far) when the
/// objective diverges; an empty ensemble is a normal, recorded failure.
pub fn explain<D: Detector + ?Sized>(
    det: &D,
    rule: &DetectionRule,
    window: &Window,
    method: Method,
    hp: &HyperParams,
) -> Result<(Ensemble, Trace)> {
    hp.validate()?;
    let mut state = State::init(method, window)?;
    let mut trace = Trace {
        records: Vec::with_capacity(hp.iterations),
        candidates: Vec::new(),
    };

    for iteration in 0..hp.iterations {
        let loss = match state.step(window, hp, det) {
            Ok(loss) => loss,
            Err(Error::NonFiniteLoss { .. }) => {
                return Err(Error::NonFiniteLoss {
                    iteration,
                    trace: Box::new(trace),
                })
            }
            Err(e) => return Err(e),
        };
        let (suspect, map, selector) = state.candidate(window, hp);
        let scores = det.score(window.context.view(), suspect.view())?;
        let valid = suspect.iter().all(|v| v.is_finite()) && is_valid(&scores, rule);
        trace.records.push(IterationRecord { loss, valid });
        if valid {
            trace.candidates.push(Member {
                suspect,
                scores,
                rank: iteration,
                map,
                selector,
            });
        }
    }

    let ensemble = Ensemble {
        method,
        members: subsample_grid(&trace.candidates, hp.max_ensemble),
    };
    Ok((ensemble, trace))
}

/// Indices `round(i (K-1) / (N-1))`, `i = 0..N`, of a regular grid over `K`
/// ranked items. Everything is kept when `K <= N`.
pub fn subsample_indices(k: usize, n: usize) -> Vec<usize> {
    if k <= n {
        return (0..k).collect();
    }
    if n <= 1 {
        return if n == 1 { vec![0] } else { Vec::new() };
    }
    let mut out: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        let idx = (i as f64 * (k - 1) as f64 / (n - 1) as f64).round() as usize;
        if out.last() != Some(&idx) {
            out.push(idx);
        }
    }
    out
}

pub fn subsample_grid<T: Clone>(candidates: &[T], n: usize) -> Vec<T> {
    subsample_indices(candidates.len(), n)
        .into_iter()
        .map(|i| candidates[i].clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::ZScoreDetector;
    use crate::types::Origin;
    use ndarray::Array;

    fn spike_window() -> Window {
        let context = Array::from_shape_fn((60, 1), |(i, _)| (i as f64 * 0.4).sin());
        let mut suspect = Array::from_shape_fn((10, 1), |(i, _)| ((60 + i) as f64 * 0.4).sin());
        suspect[[3, 0]] += 4.0;
        Window::new(
            context,
            suspect,
            Origin {
                series: "spike".into(),
                start: 60,
            },
        )
        .unwrap()
    }

    #[test]
    fn grid_examples() {
        assert_eq!(subsample_indices(5, 2), vec![0, 4]);
        assert_eq!(subsample_indices(3, 100), vec![0, 1, 2]);
        let idx = subsample_indices(250, 100);
        assert_eq!(idx.len(), 100);
        assert_eq!((idx[0], idx[99]), (0, 249));
        // Oracle: enumerate the formula directly.
        for (i, &v) in idx.iter().enumerate() {
            assert_eq!(v, (i as f64 * 249.0 / 99.0).round() as usize);
        }
        assert!(idx.windows(2).all(|p| (2..=3).contains(&(p[1] - p[0]))));
        assert_eq!(subsample_indices(0, 5), Vec::<usize>::new());
        assert_eq!(subsample_indices(7, 1), vec![0]);
    }

    #[test]
    fn already_normal_window_is_valid_immediately() {
        let mut w = spike_window();
        w.suspect[[3, 0]] -= 4.0;
        let rule = DetectionRule::new(0.5).unwrap();
        let hp = HyperParams {
            iterations: 5,
            ..HyperParams::default()
        };
        let (ens, trace) = explain(&ZScoreDetector::default(), &rule, &w, Method::Ice, &hp).unwrap();
        assert!(trace.records[0].valid);
        assert_eq!(ens.members[0].rank, 0);
    }

    #[test]
    fn ice_without_penalties_finds_valid_members() {
        let w = spike_window();
        let det = ZScoreDetector::default();
        let rule = DetectionRule::new(0.5).unwrap();
        assert!(!is_valid(&det.score_window(&w).unwrap(), &rule));
        let hp = HyperParams {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda_t: 0.0,
            ..HyperParams::default()
        };
        let (ens, _) = explain(&det, &rule, &w, Method::Ice, &hp).unwrap();
        assert!(!ens.is_empty());
        assert!(ens.len() <= hp.max_ensemble);
        for m in &ens.members {
            let s = det.score(w.context.view(), m.suspect.view()).unwrap();
            assert!(is_valid(&s, &rule));
        }
        assert!(ens.members.windows(2).all(|p| p[0].rank < p[1].rank));
    }

    #[test]
    fn divergent_learning_rate_never_yields_invalid_members() {
        let w = spike_window();
        let det = ZScoreDetector::default();
        let rule = DetectionRule::new(0.5).unwrap();
        for method in [Method::Ice, Method::Dpe, Method::SparseIce, Method::SparseDpe] {
            let hp = HyperParams {
                learning_rate: 1e6,
                iterations: 50,
                ..HyperParams::defaults_for(method)
            };
            match explain(&det, &rule, &w, method, &hp) {
                Ok((ens, _)) => {
                    for m in &ens.members {
                        assert!(is_valid(&det.score(w.context.view(), m.suspect.view()).unwrap(), &rule));
                    }
                }
                Err(Error::NonFiniteLoss { .. }) => {}
                Err(e) => panic!("unexpected error {e}"),
            }
        }
    }

    #[test]
    fn longer_runs_extend_the_candidate_store() {
        let w = spike_window();
        let det = ZScoreDetector::default();
        let rule = DetectionRule::new(0.5).unwrap();
        for method in [Method::Ice, Method::Dpe, Method::SparseIce, Method::SparseDpe] {
            let short = HyperParams {
                iterations: 150,
                ..HyperParams::defaults_for(method)
            };
            let long = HyperParams {
                iterations: 300,
                ..short.clone()
            };
            let (_, a) = explain(&det, &rule, &w, method, &short).unwrap();
            let (_, b) = explain(&det, &rule, &w, method, &long).unwrap();
            assert_eq!(a.candidates[..], b.candidates[..a.candidates.len()]);
            assert_eq!(a.records[..], b.records[..150]);
        }
    }

    #[test]
    fn blur_variants_record_maps() {
        let w = spike_window();
        let det = ZScoreDetector::default();
        let rule = DetectionRule::new(0.5).unwrap();
        let (ens, _) = explain(&det, &rule, &w, Method::SparseDpe, &HyperParams::defaults_for(Method::SparseDpe)).unwrap();
        let m = &ens.members[0];
        assert!(m.map.is_some() && m.selector.is_some());
        let (ens, _) = explain(&det, &rule, &w, Method::Ice, &HyperParams::default()).unwrap();
        assert!(ens.members[0].map.is_none());
    }

    #[test]
    fn sampling_methods_are_rejected() {
        let w = spike_window();
        let rule = DetectionRule::default();
        assert!(explain(&ZScoreDetector::default(), &rule, &w, Method::Fs, &HyperParams::default()).is_err());
    }
}
