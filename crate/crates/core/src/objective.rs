//! Penalized objectives of the four gradient explainers, with hand-derived
//! gradients.
//!
//! Every objective shares the hinge prediction term `sum_s (f_s - c)_+` and
//! the Frobenius closeness term `lambda2 / (S D) * ||W_S - W~_S||_F`. They
//! differ in their optimization variables and in where the l1 and
//! total-variation penalties act:
//!
//! | variant    | variables | l1 penalty                   | TV penalty on |
//! |------------|-----------|------------------------------|---------------|
//! | ICE        | `W~_S`    | `l1 / (S sqrt D) ||W~ - W||_1` | `W~_S`      |
//! | DPE        | `M`       | `l1 / (S sqrt D) ||M||_1`    | `M`           |
//! | sparse ICE | `w, Z`    | `l1 / sqrt D ||w||_1`        | `Z`           |
//! | sparse DPE | `w, t`    | `l1 / sqrt D ||w||_1`        | `t`           |
//!
//! Subgradients of `|.|` and of the hinge are taken as 0 at the kink; the
//! Frobenius norm has gradient 0 at the origin.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::detect::Detector;
use crate::error::{Error, Result};
use crate::optimize::Trace;
use crate::perturb::{apply_map_with_grad, mix_sparse, outer_map};
use crate::types::{HyperParams, Window};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub pred: f64,
    pub closeness: f64,
    pub smoothness: f64,
    pub sparsity: f64,
}

impl LossBreakdown {
    fn new(pred: f64, closeness: f64, smoothness: f64, sparsity: f64) -> Result<Self> {
        let b = Self {
            total: pred + closeness + smoothness + sparsity,
            pred,
            closeness,
            smoothness,
            sparsity,
        };
        if [b.total, pred, closeness, smoothness, sparsity]
            .iter()
            .all(|v| v.is_finite())
        {
            Ok(b)
        } else {
            Err(Error::NonFiniteLoss {
                iteration: 0,
                trace: Box::new(Trace::default()),
            })
        }
    }

    pub fn penalties(&self) -> f64 {
        self.closeness + self.smoothness + self.sparsity
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sum of per-timestamp hinges `(score - c)_+` and its gradient.
pub fn hinge_pred(scores: ArrayView1<f64>, c: f64) -> (f64, Array1<f64>) {
    let value = scores.iter().map(|&s| (s - c).max(0.0)).sum();
    let grad = scores.mapv(|s| if s > c { 1.0 } else { 0.0 });
    (value, grad)
}

/// Total variation along time, summed over columns, with its subgradient.
fn total_variation(x: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let mut value = 0.0;
    let mut grad = Array2::zeros(x.dim());
    for t in 1..x.nrows() {
        for i in 0..x.ncols() {
            let diff = x[[t, i]] - x[[t - 1, i]];
            value += diff.abs();
            let g = sign(diff);
            grad[[t, i]] += g;
            grad[[t - 1, i]] -= g;
        }
    }
    (value, grad)
}

fn total_variation_vec(x: ArrayView1<f64>) -> (f64, Array1<f64>) {
    let col = x.insert_axis(Axis(1));
    let (v, g) = total_variation(col);
    (v, g.remove_axis(Axis(1)))
}

fn smoothness_scale(s: usize) -> f64 {
    // A single-step suspect window has no temporal differences.
    if s > 1 {
        1.0 / (s - 1) as f64
    } else {
        0.0
    }
}

/// Hinge and Frobenius terms evaluated at a candidate suspect window, with
/// their gradient with respect to the candidate.
struct Shared {
    pred: f64,
    frobenius: f64,
    grad: Array2<f64>,
}

fn shared_terms<D: Detector + ?Sized>(
    window: &Window,
    cand: ArrayView2<f64>,
    hp: &HyperParams,
    det: &D,
) -> Result<Shared> {
    window.check_suspect_shape(&cand)?;
    let (s, d) = cand.dim();
    let scores = det.score(window.context.view(), cand)?;
    let (pred, cot) = hinge_pred(scores.view(), hp.margin_c);
    let mut grad = det.vjp(window.context.view(), cand, cot.view())?;

    let delta = &cand - &window.suspect;
    let norm = delta.mapv(|x| x * x).sum().sqrt();
    let k = hp.lambda2 / (s * d) as f64;
    if norm > 0.0 {
        grad.scaled_add(k / norm, &delta);
    }
    Ok(Shared {
        pred,
        frobenius: k * norm,
        grad,
    })
}

/// Plain ICE objective over a candidate suspect window.
pub fn loss_ice<D: Detector + ?Sized>(
    window: &Window,
    cand: ArrayView2<f64>,
    hp: &HyperParams,
    det: &D,
) -> Result<(LossBreakdown, Array2<f64>)> {
    let Shared {
        pred,
        frobenius,
        mut grad,
    } = shared_terms(window, cand, hp, det)?;
    let (s, d) = cand.dim();

    let k1 = hp.lambda1 / (s as f64 * (d as f64).sqrt());
    let delta = &cand - &window.suspect;
    let l1 = k1 * delta.mapv(f64::abs).sum();
    grad.scaled_add(k1, &delta.mapv(sign));

    let kt = hp.lambda_t * smoothness_scale(s) / d as f64;
    let (tv, tv_grad) = total_variation(cand);
    grad.scaled_add(kt, &tv_grad);

    let breakdown = LossBreakdown::new(pred, l1 + frobenius, kt * tv, 0.0)?;
    Ok((breakdown, grad))
}

/// DPE objective over a perturbation map.
pub fn loss_dpe<D: Detector + ?Sized>(
    window: &Window,
    map: ArrayView2<f64>,
    hp: &HyperParams,
    det: &D,
) -> Result<(LossBreakdown, Array2<f64>)> {
    window.check_suspect_shape(&map)?;
    let (s, d) = map.dim();
    let (cand, dcand) = apply_map_with_grad(window, map, hp.sigma_max);
    let Shared {
        pred,
        frobenius,
        grad: gcand,
    } = shared_terms(window, cand.view(), hp, det)?;
    let mut grad = gcand * &dcand;

    let k1 = hp.lambda1 / (s as f64 * (d as f64).sqrt());
    let l1 = k1 * map.mapv(f64::abs).sum();
    grad.scaled_add(k1, &map.mapv(sign));

    let kt = hp.lambda_t * smoothness_scale(s) / d as f64;
    let (tv, tv_grad) = total_variation(map);
    grad.scaled_add(kt, &tv_grad);

    let breakdown = LossBreakdown::new(pred, frobenius, kt * tv, l1)?;
    Ok((breakdown, grad))
}

/// Sparse ICE objective over a dimension selector `w` and replacement
/// values `z`. Returns gradients `(d/dw, d/dz)`.
pub fn loss_sparse_ice<D: Detector + ?Sized>(
    window: &Window,
    w: ArrayView1<f64>,
    z: ArrayView2<f64>,
    hp: &HyperParams,
    det: &D,
) -> Result<(LossBreakdown, Array1<f64>, Array2<f64>)> {
    window.check_suspect_shape(&z)?;
    let (s, d) = z.dim();
    if w.len() != d {
        return Err(Error::shape(format!("selector of length {d}"), w.len()));
    }
    let cand = mix_sparse(window.suspect.view(), w, z);
    let Shared {
        pred,
        frobenius,
        grad: gcand,
    } = shared_terms(window, cand.view(), hp, det)?;

    let mut grad_z = &gcand * &w.insert_axis(Axis(0));
    let diff = &z - &window.suspect;
    let mut grad_w = (&gcand * &diff).sum_axis(Axis(0));

    let k1 = hp.lambda1 / (d as f64).sqrt();
    let l1 = k1 * w.mapv(f64::abs).sum();
    grad_w.scaled_add(k1, &w.mapv(sign));

    let kt = hp.lambda_t * smoothness_scale(s) / d as f64;
    let (tv, tv_grad) = total_variation(z);
    grad_z.scaled_add(kt, &tv_grad);

    let breakdown = LossBreakdown::new(pred, frobenius, kt * tv, l1)?;
    Ok((breakdown, grad_w, grad_z))
}

/// Sparse DPE objective over `M = t ⊗ w`. Returns gradients `(d/dw, d/dt)`.
pub fn loss_sparse_dpe<D: Detector + ?Sized>(
    window: &Window,
    w: ArrayView1<f64>,
    t: ArrayView1<f64>,
    hp: &HyperParams,
    det: &D,
) -> Result<(LossBreakdown, Array1<f64>, Array1<f64>)> {
    let (s, d) = window.suspect.dim();
    if w.len() != d || t.len() != s {
        return Err(Error::shape(
            format!("selector {d} / time profile {s}"),
            format!("{} / {}", w.len(), t.len()),
        ));
    }
    let map = outer_map(w, t);
    let (cand, dcand) = apply_map_with_grad(window, map.view(), hp.sigma_max);
    let Shared {
        pred,
        frobenius,
        grad: gcand,
    } = shared_terms(window, cand.view(), hp, det)?;
    let gmap = gcand * &dcand;

    let mut grad_w = gmap.t().dot(&t);
    let mut grad_t = gmap.dot(&w);

    let k1 = hp.lambda1 / (d as f64).sqrt();
    let l1 = k1 * w.mapv(f64::abs).sum();
    grad_w.scaled_add(k1, &w.mapv(sign));

    let kt = hp.lambda_t * smoothness_scale(s);
    let (tv, tv_grad) = total_variation_vec(t);
    grad_t.scaled_add(kt, &tv_grad);

    let breakdown = LossBreakdown::new(pred, frobenius, kt * tv, l1)?;
    Ok((breakdown, grad_w, grad_t))
}
