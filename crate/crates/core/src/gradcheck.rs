//! Central-difference verification of the explainers' analytic gradients.
//!
//! Each objective is viewed as a function of one flat parameter vector:
//! ICE `W~_S`, DPE `M`, sparse ICE `[w, Z]` and sparse DPE `[w, t]`, with
//! matrices in row-major order.

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::detect::{Detector, DetectorState, LinearReconDetector, ZScoreDetector};
use crate::error::{Error, Result};
use crate::objective::{loss_dpe, loss_ice, loss_sparse_dpe, loss_sparse_ice};
use crate::perturb::{apply_map, mix_sparse, outer_map};
use crate::types::{HyperParams, Method, Origin, TimeSeries, Window};

/// Number of parameters of `method` on an `s x d` suspect window.
pub fn param_len(method: Method, s: usize, d: usize) -> Result<usize> {
    match method {
        Method::Ice | Method::Dpe => Ok(s * d),
        Method::SparseIce => Ok(d + s * d),
        Method::SparseDpe => Ok(d + s),
        _ => Err(Error::invalid("method", format!("{method} has no objective"))),
    }
}

fn unflatten(p: &[f64], rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), p.to_vec()).expect("caller checked the length")
}

fn concat(a: ArrayView1<f64>, b: impl IntoIterator<Item = f64>) -> Vec<f64> {
    a.iter().copied().chain(b).collect()
}

/// Objective value and analytic gradient at the flat parameters `p`.
pub fn flat_loss<D: Detector + ?Sized>(
    method: Method,
    window: &Window,
    p: &[f64],
    hp: &HyperParams,
    det: &D,
) -> Result<(f64, Vec<f64>)> {
    let (s, d) = window.suspect.dim();
    let n = param_len(method, s, d)?;
    if p.len() != n {
        return Err(Error::shape(n, p.len()));
    }
    match method {
        Method::Ice => {
            let (b, g) = loss_ice(window, unflatten(p, s, d).view(), hp, det)?;
            Ok((b.total, g.iter().copied().collect()))
        }
        Method::Dpe => {
            let (b, g) = loss_dpe(window, unflatten(p, s, d).view(), hp, det)?;
            Ok((b.total, g.iter().copied().collect()))
        }
        Method::SparseIce => {
            let w = ArrayView1::from(&p[..d]);
            let z = unflatten(&p[d..], s, d);
            let (b, gw, gz) = loss_sparse_ice(window, w, z.view(), hp, det)?;
            Ok((b.total, concat(gw.view(), gz.iter().copied())))
        }
        Method::SparseDpe => {
            let w = ArrayView1::from(&p[..d]);
            let t = ArrayView1::from(&p[d..]);
            let (b, gw, gt) = loss_sparse_dpe(window, w, t, hp, det)?;
            Ok((b.total, concat(gw.view(), gt.iter().copied())))
        }
        _ => unreachable!("param_len rejects sampling methods"),
    }
}

/// Candidate suspect window produced by the flat parameters.
pub fn candidate(method: Method, window: &Window, p: &[f64], hp: &HyperParams) -> Result<Array2<f64>> {
    let (s, d) = window.suspect.dim();
    let n = param_len(method, s, d)?;
    if p.len() != n {
        return Err(Error::shape(n, p.len()));
    }
    Ok(match method {
        Method::Ice => unflatten(p, s, d),
        Method::Dpe => apply_map(window, unflatten(p, s, d).view(), hp.sigma_max),
        Method::SparseIce => mix_sparse(window.suspect.view(), ArrayView1::from(&p[..d]), unflatten(&p[d..], s, d).view()),
        Method::SparseDpe => {
            let map = outer_map(ArrayView1::from(&p[..d]), ArrayView1::from(&p[d..]));
            apply_map(window, map.view(), hp.sigma_max)
        }
        _ => unreachable!("param_len rejects sampling methods"),
    })
}

fn tv_args(x: ArrayView2<'_, f64>) -> impl Iterator<Item = f64> + '_ {
    (1..x.nrows()).flat_map(move |t| (0..x.ncols()).map(move |i| x[[t, i]] - x[[t - 1, i]]))
}

/// Smallest absolute argument of any `|.|` (or max tie) in the objective
/// at `p`, including the z-score detector's deviations and argmax ties.
pub fn kink_distance(
    method: Method,
    window: &Window,
    p: &[f64],
    hp: &HyperParams,
    zscore: Option<&ZScoreDetector>,
) -> Result<f64> {
    let (s, d) = window.suspect.dim();
    let cand = candidate(method, window, p, hp)?;
    let mut args: Vec<f64> = Vec::new();
    let delta = &cand - &window.suspect;
    args.push(delta.mapv(|x| x * x).sum().sqrt());
    match method {
        Method::Ice => {
            args.extend(delta.iter().copied());
            args.extend(tv_args(cand.view()));
        }
        Method::Dpe => {
            let m = unflatten(p, s, d);
            args.extend(m.iter().copied());
            args.extend(tv_args(m.view()));
        }
        Method::SparseIce => {
            args.extend(p[..d].iter().copied());
            args.extend(tv_args(unflatten(&p[d..], s, d).view()));
        }
        Method::SparseDpe => {
            args.extend(p[..d].iter().copied());
            let t = ArrayView1::from(&p[d..]).insert_axis(Axis(1));
            args.extend(tv_args(t));
        }
        _ => unreachable!("candidate rejects sampling methods"),
    }
    if let Some(z) = zscore {
        let mean = window.context.mean_axis(Axis(0)).ok_or(Error::EmptyContext)?;
        let std = window.context.std_axis(Axis(0), 0.0);
        for row in cand.outer_iter() {
            let zs: Vec<f64> = (0..d).map(|i| (row[i] - mean[i]).abs() / (std[i] + z.eps)).collect();
            args.extend((0..d).map(|i| row[i] - mean[i]));
            let mut sorted = zs.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            if d > 1 {
                args.push(sorted[0] - sorted[1]);
            }
        }
    }
    Ok(args.into_iter().map(f64::abs).fold(f64::INFINITY, f64::min))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `||g_analytic - g_fd|| / max(||g_analytic||, ||g_fd||)`.
    pub rel_error: f64,
    pub analytic_norm: f64,
}

/// Compare the analytic gradient with central differences of step `h`.
pub fn check_gradient<D: Detector + ?Sized>(
    method: Method,
    window: &Window,
    p: &[f64],
    hp: &HyperParams,
    det: &D,
    h: f64,
) -> Result<GradCheck> {
    let (_, analytic) = flat_loss(method, window, p, hp, det)?;
    let mut probe = p.to_vec();
    let mut numeric = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        probe[i] = p[i] + h;
        let (up, _) = flat_loss(method, window, &probe, hp, det)?;
        probe[i] = p[i] - h;
        let (down, _) = flat_loss(method, window, &probe, hp, det)?;
        probe[i] = p[i];
        numeric.push((up - down) / (2.0 * h));
    }
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(&numeric).map(|(a, b)| a - b));
    let na = norm(&mut analytic.iter().copied());
    let nn = norm(&mut numeric.iter().copied());
    let scale = na.max(nn);
    Ok(GradCheck {
        rel_error: if scale > 0.0 { diff / scale } else { 0.0 },
        analytic_norm: na,
    })
}

/// Which built-in detector a random instance uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectorChoice {
    Zscore,
    Recon,
}

/// A random gradient-check problem.
#[derive(Debug, Clone)]
pub struct Instance {
    pub window: Window,
    pub params: Vec<f64>,
    pub hp: HyperParams,
    pub detector: DetectorState,
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

const CONTEXT_LEN: usize = 24;

/// Random instance whose suspect scores are away from saturation, with
/// every penalty active.
pub fn random_instance<R: Rng + ?Sized>(
    rng: &mut R,
    method: Method,
    choice: DetectorChoice,
    s: usize,
    d: usize,
) -> Result<Instance> {
    let hp = HyperParams {
        lambda1: rng.random_range(0.1..1.0),
        lambda2: rng.random_range(0.1..1.0),
        lambda_t: rng.random_range(0.1..1.0),
        sigma_max: rng.random_range(1.0..5.0),
        margin_c: 0.0,
        ..HyperParams::defaults_for(method)
    };
    let (window, detector) = match choice {
        DetectorChoice::Zscore => {
            let context = Array2::from_shape_fn((CONTEXT_LEN, d), |_| normal(rng));
            let mean = context.mean_axis(Axis(0)).expect("non-empty");
            let std = context.std_axis(Axis(0), 0.0);
            // Deviations of 2 to 4 standard deviations keep the logistic
            // responsive (scores roughly 0.1 to 0.9).
            let suspect = Array2::from_shape_fn((s, d), |(_, i)| {
                let z = rng.random_range(2.0..4.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                mean[i] + z * std[i]
            });
            let w = Window::new(context, suspect, Origin::default())?;
            (w, DetectorState::Zscore(ZScoreDetector::default()))
        }
        DetectorChoice::Recon => recon_instance(rng, s, d)?,
    };
    let n = param_len(method, s, d)?;
    let params: Vec<f64> = match method {
        Method::Ice => window.suspect.iter().map(|&x| x + 0.3 * normal(rng)).collect(),
        Method::Dpe | Method::SparseDpe => (0..n).map(|_| rng.random_range(0.05..0.95)).collect(),
        Method::SparseIce => {
            let mut p: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..0.95)).collect();
            p.extend(window.suspect.iter().map(|&x| x + 0.3 * normal(rng)));
            p
        }
        _ => unreachable!("param_len rejects sampling methods"),
    };
    Ok(Instance {
        window,
        params,
        hp,
        detector,
    })
}

/// A reconstruction detector fitted on a noisy multichannel sine, and a
/// suspect window whose error sits near the detector's scale so the score
/// is responsive.
fn recon_instance<R: Rng + ?Sized>(rng: &mut R, s: usize, d: usize) -> Result<(Window, DetectorState)> {
    let len = 400;
    let values = Array2::from_shape_fn((len, d), |(t, i)| {
        (2.0 * std::f64::consts::PI * t as f64 / 37.0 + i as f64).sin() + 0.1 * normal(rng)
    });
    let train = TimeSeries::new("gradcheck", values, None)?;
    let h = 3.min(s * d - 1).max(1);
    let det = LinearReconDetector::fit(&train, s, h, 0.99, 5.0)?;
    let start = rng.random_range(CONTEXT_LEN..len - s);
    let base = train.values.slice(s![start..start + s, ..]).to_owned();
    let context = train.values.slice(s![start - CONTEXT_LEN..start, ..]).to_owned();
    let noise = Array2::from_shape_fn((s, d), |_| normal(rng));
    // Pick the noise amplitude that puts the score at a random target in
    // (0.2, 0.8); the error grows with the amplitude.
    let target = rng.random_range(0.2..0.8);
    let score = |a: f64| -> Result<f64> {
        let sus = &base + &(&noise * a);
        Ok(det.score(context.view(), sus.view())?[0])
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    while score(hi)? < target {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::InsufficientData("cannot reach the target score".into()));
        }
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if score(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let suspect = &base + &(&noise * hi);
    Ok((Window::new(context, suspect, Origin::default())?, DetectorState::LinearRecon(det)))
}
