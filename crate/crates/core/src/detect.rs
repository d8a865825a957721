//! Differentiable anomaly detectors.
//!
//! Explainers only need two things from a detector: per-timestamp scores in
//! `[0, 1]` for the suspect segment of a window, and vector-Jacobian products
//! of those scores with respect to the suspect values. The context is always
//! treated as a constant.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::serde_array;
use crate::types::{TimeSeries, Window};

pub trait Detector: Send + Sync {
    /// Scores of the `S` suspect timestamps.
    fn score(&self, context: ArrayView2<f64>, suspect: ArrayView2<f64>) -> Result<Array1<f64>>;

    /// `sum_s cotangent[s] * d score[s] / d suspect`, an `S x D` matrix.
    fn vjp(
        &self,
        context: ArrayView2<f64>,
        suspect: ArrayView2<f64>,
        cotangent: ArrayView1<f64>,
    ) -> Result<Array2<f64>>;

    fn score_window(&self, window: &Window) -> Result<Array1<f64>> {
        self.score(window.context.view(), window.suspect.view())
    }
}

impl<T: Detector + ?Sized> Detector for &T {
    fn score(&self, context: ArrayView2<f64>, suspect: ArrayView2<f64>) -> Result<Array1<f64>> {
        (**self).score(context, suspect)
    }

    fn vjp(
        &self,
        context: ArrayView2<f64>,
        suspect: ArrayView2<f64>,
        cotangent: ArrayView1<f64>,
    ) -> Result<Array2<f64>> {
        (**self).vjp(context, suspect, cotangent)
    }
}

impl<T: Detector + ?Sized> Detector for Box<T> {
    fn score(&self, context: ArrayView2<f64>, suspect: ArrayView2<f64>) -> Result<Array1<f64>> {
        (**self).score(context, suspect)
    }

    fn vjp(
        &self,
        context: ArrayView2<f64>,
        suspect: ArrayView2<f64>,
        cotangent: ArrayView1<f64>,
    ) -> Result<Array2<f64>> {
        (**self).vjp(context, suspect, cotangent)
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_cotangent(suspect: &ArrayView2<f64>, cotangent: &ArrayView1<f64>) -> Result<()> {
    if cotangent.len() != suspect.nrows() {
        return Err(Error::shape(
            format!("cotangent of length {}", suspect.nrows()),
            cotangent.len(),
        ));
    }
    Ok(())
}

/// Contextual z-score detector.
///
/// Each suspect timestamp gets `raw = max_d |x - mu_d| / (sigma_d + eps)`
/// where `mu_d`, `sigma_d` are the context mean and population standard
/// deviation of dimension `d`, squashed as `logistic(gain * (raw - k))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZScoreDetector {
    pub gain: f64,
    pub k: f64,
    pub eps: f64,
}

impl Default for ZScoreDetector {
    fn default() -> Self {
        Self {
            gain: 2.0,
            k: 3.0,
            eps: 1e-8,
        }
    }
}

impl ZScoreDetector {
    pub fn new(gain: f64, k: f64, eps: f64) -> Result<Self> {
        for (name, v) in [("gain", gain), ("k", k), ("eps", eps)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, "must be finite and > 0"));
            }
        }
        Ok(Self { gain, k, eps })
    }

    fn context_stats(&self, context: &ArrayView2<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        if context.nrows() == 0 {
            return Err(Error::EmptyContext);
        }
        let mean = context.mean_axis(Axis(0)).expect("non-empty context");
        let std = context.std_axis(Axis(0), 0.0);
        Ok((mean, std))
    }

    /// Per-timestamp `(raw, argmax dimension)`.
    fn raw(
        &self,
        context: &ArrayView2<f64>,
        suspect: &ArrayView2<f64>,
    ) -> Result<(Vec<(f64, usize)>, Array1<f64>, Array1<f64>)> {
        if context.ncols() != suspect.ncols() {
            return Err(Error::shape(context.ncols(), suspect.ncols()));
        }
        let (mean, std) = self.context_stats(context)?;
        let raw = suspect
            .outer_iter()
            .map(|row| {
                let mut best = (f64::NEG_INFINITY, 0);
                for (d, &x) in row.iter().enumerate() {
                    let z = (x - mean[d]).abs() / (std[d] + self.eps);
                    // First attaining dimension wins ties.
                    if z > best.0 {
                        best = (z, d);
                    }
                }
                best
            })
            .collect();
        Ok((raw, mean, std))
    }
}

impl Detector for ZScoreDetector {
    fn score(&self, context: ArrayView2<f64>, suspect: ArrayView2<f64>) -> Result<Array1<f64>> {
        let (raw, _, _) = self.raw(&context, &suspect)?;
        Ok(raw
            .into_iter()
            .map(|(r, _)| logistic(self.gain * (r - self.k)))
            .collect())
    }

    fn vjp(
        &self,
        context: ArrayView2<f64>,
        suspect: ArrayView2<f64>,
        cotangent: ArrayView1<f64>,
    ) -> Result<Array2<f64>> {
        check_cotangent(&suspect, &cotangent)?;
        let (raw, mean, std) = self.raw(&context, &suspect)?;
        let mut grad = Array2::zeros(suspect.dim());
        for (t, &(r, d)) in raw.iter().enumerate() {
            let c = cotangent[t];
            if c == 0.0 {
                continue;
            }
            let s = logistic(self.gain * (r - self.k));
            let diff = suspect[[t, d]] - mean[d];
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            grad[[t, d]] = c * self.gain * s * (1.0 - s) * sign / (std[d] + self.eps);
        }
        Ok(grad)
    }
}

/// Linear reconstruction detector: suspect windows are flattened, centered
/// and projected onto the top principal directions of the training windows.
/// The normalized reconstruction error is squashed into one window-level
/// score, repeated for every suspect timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearReconDetector {
    pub suspect_len: usize,
    pub dims: usize,
    #[serde(with = "serde_array::vector")]
    pub mean: Array1<f64>,
    /// `(S*D) x h`, orthonormal columns, row-major.
    #[serde(with = "serde_array::matrix")]
    pub basis: Array2<f64>,
    pub error_scale: f64,
    pub gain: f64,
}

/// Smallest admissible error scale.
const MIN_ERROR_SCALE: f64 = 1e-12;

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

impl LinearReconDetector {
    pub fn fit(train: &TimeSeries, suspect_len: usize, h: usize, q: f64, gain: f64) -> Result<Self> {
        let dims = train.dims();
        let width = suspect_len * dims;
        if suspect_len == 0 {
            return Err(Error::invalid("S", "must be >= 1"));
        }
        if h == 0 || h >= width {
            return Err(Error::invalid("h", format!("need 1 <= h < S*D = {width}")));
        }
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::invalid("q", "must lie in (0, 1)"));
        }
        if !(gain.is_finite() && gain > 0.0) {
            return Err(Error::invalid("gain", "must be finite and > 0"));
        }
        let count = (train.len() + 1).saturating_sub(suspect_len);
        if count < h + suspect_len {
            return Err(Error::InsufficientData(format!(
                "{count} training windows, need at least {}",
                h + suspect_len
            )));
        }
        let flat = Array2::from_shape_fn((count, width), |(i, j)| {
            train.values[[i + j / dims, j % dims]]
        });
        let mean = flat.mean_axis(Axis(0)).expect("count > 0");
        let centered = &flat - &mean;
        let cov = centered.t().dot(&centered) / count as f64;
        let total: f64 = cov.diag().sum();
        if total <= f64::EPSILON * (1.0 + mean.mapv(f64::abs).sum()) {
            return Err(Error::DegenerateBasis);
        }

        let cov_na = DMatrix::from_fn(width, width, |i, j| cov[[i, j]]);
        let eig = SymmetricEigen::new(cov_na);
        let mut order: Vec<usize> = (0..width).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let basis = Array2::from_shape_fn((width, h), |(i, k)| eig.eigenvectors[(i, order[k])]);

        let mut det = Self {
            suspect_len,
            dims,
            mean,
            basis,
            error_scale: 1.0,
            gain,
        };
        let errors: Vec<f64> = centered
            .outer_iter()
            .map(|v| det.residual(v).mapv(|r| r * r).sum() / width as f64)
            .collect();
        det.error_scale = quantile(&errors, q).max(MIN_ERROR_SCALE);
        Ok(det)
    }

    fn residual(&self, centered: ArrayView1<f64>) -> Array1<f64> {
        let coeffs = self.basis.t().dot(&centered);
        &centered - &self.basis.dot(&coeffs)
    }

    fn flatten(&self, suspect: &ArrayView2<f64>) -> Result<Array1<f64>> {
        if suspect.dim() != (self.suspect_len, self.dims) {
            return Err(Error::shape(
                format!("({}, {})", self.suspect_len, self.dims),
                format!("{:?}", suspect.dim()),
            ));
        }
        let flat: Array1<f64> = suspect.iter().copied().collect();
        Ok(flat - &self.mean)
    }

    /// Normalized reconstruction error `||v - P v||^2 / (S*D)`.
    pub fn reconstruction_error(&self, suspect: ArrayView2<f64>) -> Result<f64> {
        let v = self.flatten(&suspect)?;
        Ok(self.residual(v.view()).mapv(|r| r * r).sum() / v.len() as f64)
    }
}

impl Detector for LinearReconDetector {
    fn score(&self, _context: ArrayView2<f64>, suspect: ArrayView2<f64>) -> Result<Array1<f64>> {
        let e = self.reconstruction_error(suspect)?;
        let s = logistic(self.gain * (e - self.error_scale) / self.error_scale);
        Ok(Array1::from_elem(self.suspect_len, s))
    }

    fn vjp(
        &self,
        _context: ArrayView2<f64>,
        suspect: ArrayView2<f64>,
        cotangent: ArrayView1<f64>,
    ) -> Result<Array2<f64>> {
        check_cotangent(&suspect, &cotangent)?;
        let v = self.flatten(&suspect)?;
        let r = self.residual(v.view());
        let width = v.len() as f64;
        let e = r.mapv(|x| x * x).sum() / width;
        let s = logistic(self.gain * (e - self.error_scale) / self.error_scale);
        let factor = cotangent.sum() * s * (1.0 - s) * self.gain / self.error_scale * 2.0 / width;
        let grad = r * factor;
        Ok(grad
            .into_shape_with_order((self.suspect_len, self.dims))
            .expect("flattened row-major"))
    }
}

/// Serializable state of a built-in detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DetectorState {
    Zscore(ZScoreDetector),
    LinearRecon(LinearReconDetector),
}

impl Detector for DetectorState {
    fn score(&self, context: ArrayView2<f64>, suspect: ArrayView2<f64>) -> Result<Array1<f64>> {
        match self {
            DetectorState::Zscore(d) => d.score(context, suspect),
            DetectorState::LinearRecon(d) => d.score(context, suspect),
        }
    }

    fn vjp(
        &self,
        context: ArrayView2<f64>,
        suspect: ArrayView2<f64>,
        cotangent: ArrayView1<f64>,
    ) -> Result<Array2<f64>> {
        match self {
            DetectorState::Zscore(d) => d.vjp(context, suspect, cotangent),
            DetectorState::LinearRecon(d) => d.vjp(context, suspect, cotangent),
        }
    }
}

/// Gradients of a black-box scorer by central differences over every
/// suspect entry. Costs `2 * S * D` scorer calls per non-zero product.
pub struct FiniteDifference<F> {
    scorer: F,
    step: f64,
}

impl<F> FiniteDifference<F>
where
    F: Fn(ArrayView2<f64>, ArrayView2<f64>) -> Result<Array1<f64>> + Send + Sync,
{
    pub fn new(scorer: F, step: f64) -> Result<Self> {
        if !(step.is_finite() && step > 0.0) {
            return Err(Error::invalid("step", "must be finite and > 0"));
        }
        Ok(Self { scorer, step })
    }
}

impl<F> Detector for FiniteDifference<F>
where
    F: Fn(ArrayView2<f64>, ArrayView2<f64>) -> Result<Array1<f64>> + Send + Sync,
{
    fn score(&self, context: ArrayView2<f64>, suspect: ArrayView2<f64>) -> Result<Array1<f64>> {
        (self.scorer)(context, suspect)
    }

    fn vjp(
        &self,
        context: ArrayView2<f64>,
        suspect: ArrayView2<f64>,
        cotangent: ArrayView1<f64>,
    ) -> Result<Array2<f64>> {
        check_cotangent(&suspect, &cotangent)?;
        let mut grad = Array2::zeros(suspect.dim());
        if cotangent.iter().all(|&c| c == 0.0) {
            return Ok(grad);
        }
        let mut probe = suspect.to_owned();
        for idx in 0..probe.len() {
            let (t, d) = (idx / probe.ncols(), idx % probe.ncols());
            let x = probe[[t, d]];
            probe[[t, d]] = x + self.step;
            let up = (self.scorer)(context, probe.view())?;
            probe[[t, d]] = x - self.step;
            let down = (self.scorer)(context, probe.view())?;
            probe[[t, d]] = x;
            grad[[t, d]] = (&up - &down).dot(&cotangent) / (2.0 * self.step);
        }
        Ok(grad)
    }
}

/// Per-timestamp scores of a whole series.
///
/// Timestamp `t` receives the first score of the window whose suspect part
/// starts at `t`; timestamps without a full window (too close to either end)
/// score 0.
pub fn score_series<D: Detector + ?Sized>(
    det: &D,
    series: &TimeSeries,
    suspect_len: usize,
    context_len: usize,
) -> Result<Vec<f64>> {
    let t_len = series.len();
    let mut scores = vec![0.0; t_len];
    if t_len < context_len + suspect_len || suspect_len == 0 {
        return Ok(scores);
    }
    let starts: Vec<usize> = (context_len..=t_len - suspect_len).collect();
    let scored = starts
        .par_iter()
        .map(|&t| {
            let ctx = series.values.slice(ndarray::s![t - context_len..t, ..]);
            let sus = series.values.slice(ndarray::s![t..t + suspect_len, ..]);
            det.score(ctx, sus).map(|s| s[0])
        })
        .collect::<Result<Vec<f64>>>()?;
    for (t, s) in starts.into_iter().zip(scored) {
        scores[t] = s;
    }
    Ok(scores)
}
