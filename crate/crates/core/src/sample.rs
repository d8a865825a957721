//! Gradient-free explainers: the forecasting set, built on a per-dimension
//! Gaussian AR(p) forecaster, and the naive interpolation baseline.

use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::detect::Detector;
use crate::error::{Error, Result};
use crate::types::{is_valid, DetectionRule, Ensemble, Member, Method, TimeSeries, Window};

pub const SIGMA_FLOOR: f64 = 1e-8;
const RIDGE: f64 = 1e-6;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArComponent {
    /// `coefficients[k]` multiplies the value `k + 1` steps back.
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub sigma: f64,
}

impl ArComponent {
    /// One-step predictive mean given `history`, most recent value last.
    fn mean(&self, history: &[f64]) -> f64 {
        let n = history.len();
        self.coefficients
            .iter()
            .enumerate()
            .map(|(k, c)| c * history[n - 1 - k])
            .sum::<f64>()
            + self.intercept
    }
}

/// Independent Gaussian AR(p) models, one per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecaster {
    pub order: usize,
    pub components: Vec<ArComponent>,
}

fn solve_normal_equations(xtx: DMatrix<f64>, xty: DVector<f64>) -> DVector<f64> {
    let scale = xtx.diagonal().max().max(f64::MIN_POSITIVE);
    if let Some(chol) = xtx.clone().cholesky() {
        let min_pivot = chol.l_dirty().diagonal().min();
        if min_pivot * min_pivot > 1e-12 * scale {
            return chol.solve(&xty);
        }
    }
    let n = xtx.nrows();
    let ridged = xtx + DMatrix::identity(n, n) * RIDGE;
    match ridged.clone().cholesky() {
        Some(chol) => chol.solve(&xty),
        None => ridged
            .lu()
            .solve(&xty)
            .unwrap_or_else(|| DVector::zeros(n)),
    }
}

pub fn fit_forecaster(train: &TimeSeries, order: usize) -> Result<Forecaster> {
    if order == 0 {
        return Err(Error::invalid("p", "AR order must be >= 1"));
    }
    let t_len = train.len();
    if t_len <= order + 1 {
        return Err(Error::InsufficientData(format!(
            "{t_len} timestamps cannot fit an AR({order}) model"
        )));
    }
    let rows = t_len - order;
    let width = order + 1;
    let components = (0..train.dims())
        .map(|d| {
            let x = train.values.column(d);
            let design = DMatrix::from_fn(rows, width, |r, c| {
                if c == order {
                    1.0
                } else {
                    x[order + r - 1 - c]
                }
            });
            let target = DVector::from_fn(rows, |r, _| x[order + r]);
            let beta = solve_normal_equations(design.transpose() * &design, design.transpose() * &target);
            let resid = &target - &design * &beta;
            let dof = rows.saturating_sub(width).max(1);
            let sigma = (resid.norm_squared() / dof as f64).sqrt().max(SIGMA_FLOOR);
            ArComponent {
                coefficients: beta.iter().take(order).copied().collect(),
                intercept: beta[order],
                sigma,
            }
        })
        .collect();
    Ok(Forecaster { order, components })
}

impl Forecaster {
    pub fn dims(&self) -> usize {
        self.components.len()
    }

    fn check_context(&self, context: &ArrayView2<f64>) -> Result<()> {
        if context.nrows() < self.order {
            return Err(Error::InsufficientData(format!(
                "context of {} rows, forecaster needs {}",
                context.nrows(),
                self.order
            )));
        }
        if context.ncols() != self.dims() {
            return Err(Error::shape(self.dims(), context.ncols()));
        }
        Ok(())
    }

    fn seed_history(&self, context: &ArrayView2<f64>, d: usize, extra: usize) -> Vec<f64> {
        let mut h = Vec::with_capacity(self.order + extra);
        h.extend(context.slice(s![context.nrows() - self.order.., d]).iter());
        h
    }

    /// Noise-free recursive forecast over `horizon` steps.
    pub fn forecast_mean(&self, context: ArrayView2<f64>, horizon: usize) -> Result<Array2<f64>> {
        self.check_context(&context)?;
        let mut out = Array2::zeros((horizon, self.dims()));
        for (d, comp) in self.components.iter().enumerate() {
            let mut hist = self.seed_history(&context, d, horizon);
            for s in 0..horizon {
                let m = comp.mean(&hist);
                out[[s, d]] = m;
                hist.push(m);
            }
        }
        Ok(out)
    }

    /// `n` ancestral sample paths of length `horizon`, conditioned on the last
    /// `p` context rows. Draws are consumed path by path, step by step,
    /// dimension by dimension.
    pub fn sample_paths(
        &self,
        context: ArrayView2<f64>,
        horizon: usize,
        n: usize,
        seed: u64,
    ) -> Result<Vec<Array2<f64>>> {
        self.check_context(&context)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = self.dims();
        let mut paths = Vec::with_capacity(n);
        for _ in 0..n {
            let mut hist: Vec<Vec<f64>> = (0..dims).map(|d| self.seed_history(&context, d, horizon)).collect();
            let mut path = Array2::zeros((horizon, dims));
            for s in 0..horizon {
                for (d, comp) in self.components.iter().enumerate() {
                    let noise: f64 = rng.sample(StandardNormal);
                    let v = comp.mean(&hist[d]) + comp.sigma * noise;
                    path[[s, d]] = v;
                    hist[d].push(v);
                }
            }
            paths.push(path);
        }
        Ok(paths)
    }

    /// Mean teacher-forced one-step Gaussian negative log-likelihood of the
    /// suspect entries.
    pub fn nll(&self, context: ArrayView2<f64>, suspect: ArrayView2<f64>) -> Result<f64> {
        self.check_context(&context)?;
        if suspect.ncols() != self.dims() {
            return Err(Error::shape(self.dims(), suspect.ncols()));
        }
        let mut total = 0.0;
        for (d, comp) in self.components.iter().enumerate() {
            let mut hist = self.seed_history(&context, d, suspect.nrows());
            for &x in suspect.column(d) {
                let z = (x - comp.mean(&hist)) / comp.sigma;
                total += 0.5 * LN_2PI + comp.sigma.ln() + 0.5 * z * z;
                hist.push(x);
            }
        }
        Ok(total / suspect.len() as f64)
    }
}

/// Result of a sampling explainer on one window.
#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub ensemble: Ensemble,
    /// Fraction of drawn samples the detector rejected.
    pub rejection_rate: f64,
    /// Every drawn sample, valid or not, in draw order.
    pub samples: Vec<Array2<f64>>,
}

fn filter_valid<D: Detector + ?Sized>(
    det: &D,
    rule: &DetectionRule,
    window: &Window,
    method: Method,
    samples: Vec<Array2<f64>>,
) -> Result<SampleOutcome> {
    let mut members = Vec::new();
    for (rank, sample) in samples.iter().enumerate() {
        let scores = det.score(window.context.view(), sample.view())?;
        if is_valid(&scores, rule) {
            members.push(Member::new(sample.clone(), scores, rank));
        }
    }
    let n = samples.len();
    let rejection_rate = if n == 0 {
        0.0
    } else {
        (n - members.len()) as f64 / n as f64
    };
    Ok(SampleOutcome {
        ensemble: Ensemble { method, members },
        rejection_rate,
        samples,
    })
}

/// Forecasting set: keep the forecaster's sample paths the detector accepts.
pub fn explain_fs<D: Detector + ?Sized>(
    det: &D,
    rule: &DetectionRule,
    forecaster: &Forecaster,
    window: &Window,
    n: usize,
    seed: u64,
) -> Result<SampleOutcome> {
    if n == 0 {
        return Err(Error::invalid("N", "must be >= 1"));
    }
    let samples = forecaster.sample_paths(window.context.view(), window.suspect_len(), n, seed)?;
    filter_valid(det, rule, window, Method::Fs, samples)
}

/// `w * W_S + (1 - w) * last`, with `last` the final context row repeated.
pub fn naive_sample(suspect: ArrayView2<f64>, last: &Array1<f64>, w: f64) -> Array2<f64> {
    let mut out = suspect.to_owned();
    for mut row in out.rows_mut() {
        row.zip_mut_with(last, |x, &l| *x = w * *x + (1.0 - w) * l);
    }
    out
}

/// Naive baseline: interpolate between the suspect window and a constant
/// window repeating the last context row, with uniform random weights.
pub fn explain_naive<D: Detector + ?Sized>(
    det: &D,
    rule: &DetectionRule,
    window: &Window,
    n: usize,
    seed: u64,
) -> Result<SampleOutcome> {
    if window.context_len() == 0 {
        return Err(Error::EmptyContext);
    }
    if n == 0 {
        return Err(Error::invalid("N", "must be >= 1"));
    }
    let last = window.context.row(window.context_len() - 1).to_owned();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|_| naive_sample(window.suspect.view(), &last, rng.random::<f64>()))
        .collect();
    filter_valid(det, rule, window, Method::Naive, samples)
}

/// Pointwise median of samples; lower median for an even count.
pub fn median_reference(samples: &[Array2<f64>]) -> Result<Array2<f64>> {
    let first = samples.first().ok_or(Error::EmptySampleSet)?;
    let mid = (samples.len() - 1) / 2;
    let mut buf = vec![0.0; samples.len()];
    Ok(Array2::from_shape_fn(first.dim(), |idx| {
        for (b, s) in buf.iter_mut().zip(samples) {
            *b = s[idx];
        }
        buf.select_nth_unstable_by(mid, f64::total_cmp);
        buf[mid]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::ZScoreDetector;
    use crate::types::Origin;
    use approx::assert_relative_eq;
    use ndarray::{array, Array};

    fn series(values: Vec<f64>) -> TimeSeries {
        let n = values.len();
        TimeSeries::new("s", Array2::from_shape_vec((n, 1), values).unwrap(), None).unwrap()
    }

    fn white_noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    fn window(context: Array2<f64>, suspect: Array2<f64>) -> Window {
        Window::new(context, suspect, Origin { series: "s".into(), start: 0 }).unwrap()
    }

    #[test]
    fn white_noise_fit() {
        let x = white_noise(2000, 1);
        let g = fit_forecaster(&series(x.clone()), 5).unwrap();
        let bound = 3.0 / (2000f64).sqrt();
        assert!(g.components[0].coefficients.iter().all(|c| c.abs() < bound));
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
        assert!((g.components[0].sigma - std).abs() < 0.05 * std);
    }

    #[test]
    fn noiseless_ar1_recovered() {
        let x: Vec<f64> = (0..200).map(|t| 0.9f64.powi(t)).collect();
        let g = fit_forecaster(&series(x), 1).unwrap();
        assert!((g.components[0].coefficients[0] - 0.9).abs() < 1e-6);
        assert!(g.components[0].sigma < 1e-6);
    }

    #[test]
    fn constant_series_uses_ridge() {
        let g = fit_forecaster(&series(vec![5.0; 50]), 3).unwrap();
        let ctx = Array2::from_elem((3, 1), 5.0);
        let f = g.forecast_mean(ctx.view(), 4).unwrap();
        for v in f.iter() {
            assert_relative_eq!(*v, 5.0, epsilon = 1e-6);
        }
        assert_eq!(g.components[0].sigma, SIGMA_FLOOR.max(g.components[0].sigma));
    }

    #[test]
    fn fit_needs_data() {
        assert!(matches!(fit_forecaster(&series(vec![1.0, 2.0, 3.0]), 2), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn zero_noise_paths_collapse() {
        let x: Vec<f64> = (0..100).map(|t| 0.9f64.powi(t) * 3.0).collect();
        let g = fit_forecaster(&series(x.clone()), 1).unwrap();
        let ctx = Array2::from_shape_vec((5, 1), x[10..15].to_vec()).unwrap();
        let paths = g.sample_paths(ctx.view(), 6, 4, 9).unwrap();
        let mean = g.forecast_mean(ctx.view(), 6).unwrap();
        for p in &paths {
            for (a, b) in p.iter().zip(mean.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        assert!(g.sample_paths(ctx.view(), 6, 0, 9).unwrap().is_empty());
    }

    #[test]
    fn sample_mean_concentrates() {
        let x = white_noise(3000, 2);
        let g = fit_forecaster(&series(x.clone()), 5).unwrap();
        let ctx = Array2::from_shape_vec((10, 1), x[100..110].to_vec()).unwrap();
        let n = 2000;
        let paths = g.sample_paths(ctx.view(), 5, n, 3).unwrap();
        let mean = g.forecast_mean(ctx.view(), 5).unwrap();
        let sigma = g.components[0].sigma;
        for s in 0..5 {
            let m = paths.iter().map(|p| p[[s, 0]]).sum::<f64>() / n as f64;
            // Recursive draws inflate the per-step spread only slightly for
            // near-zero coefficients.
            assert!((m - mean[[s, 0]]).abs() < 4.0 * sigma / (n as f64).sqrt());
        }
        let again = g.sample_paths(ctx.view(), 5, n, 3).unwrap();
        assert_eq!(paths, again);
    }

    fn unit_forecaster(coef: f64) -> Forecaster {
        Forecaster {
            order: 1,
            components: vec![ArComponent {
                coefficients: vec![coef],
                intercept: 0.0,
                sigma: 1.0,
            }],
        }
    }

    #[test]
    fn nll_closed_forms() {
        let g = unit_forecaster(0.5);
        let ctx = array![[2.0]];
        let at_mean = g.nll(ctx.view(), array![[1.0]].view()).unwrap();
        assert_relative_eq!(at_mean, 0.918_938_533_204_672_8, epsilon = 1e-12);
        let off = g.nll(ctx.view(), array![[2.0]].view()).unwrap();
        assert_relative_eq!(off, 1.418_938_533_204_672_8, epsilon = 1e-12);
    }

    #[test]
    fn nll_matches_density_product() {
        let g = Forecaster {
            order: 1,
            components: vec![ArComponent {
                coefficients: vec![0.8],
                intercept: 0.3,
                sigma: 0.7,
            }],
        };
        let ctx = array![[1.5]];
        let sus = array![[1.1], [0.2]];
        // Teacher forcing: step 2 conditions on the observed 1.1.
        let dens = |x: f64, m: f64| (-(x - m).powi(2) / (2.0 * 0.49)).exp() / (2.0 * std::f64::consts::PI * 0.49).sqrt();
        let p = dens(1.1, 0.3 + 0.8 * 1.5) * dens(0.2, 0.3 + 0.8 * 1.1);
        let expected = -p.ln() / 2.0;
        assert_relative_eq!(g.nll(ctx.view(), sus.view()).unwrap(), expected, epsilon = 1e-9);
    }

    #[test]
    fn nll_unimodal() {
        let g = unit_forecaster(0.5);
        let ctx = array![[2.0]];
        let mut prev = f64::INFINITY;
        for x in [4.0, 3.0, 2.0, 1.5, 1.0] {
            let v = g.nll(ctx.view(), array![[x]].view()).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn fs_vacuous_and_impossible_rules() {
        let g = unit_forecaster(0.5);
        let ctx = Array::from_shape_fn((30, 1), |(i, _)| (i as f64).sin());
        let w = window(ctx, Array2::zeros((4, 1)));
        let det = ZScoreDetector::default();
        let all = explain_fs(&det, &DetectionRule::new(1.0).unwrap(), &g, &w, 20, 1).unwrap();
        assert_eq!((all.ensemble.len(), all.rejection_rate), (20, 0.0));
        let none = explain_fs(&det, &DetectionRule::new(0.0).unwrap(), &g, &w, 20, 1).unwrap();
        assert_eq!((none.ensemble.len(), none.rejection_rate), (0, 1.0));
        assert_eq!(none.samples.len(), 20);
    }

    #[test]
    fn naive_endpoints() {
        let sus = array![[4.0, 1.0], [6.0, -1.0]];
        let last = array![2.0, 0.0];
        assert_eq!(naive_sample(sus.view(), &last, 1.0), sus);
        assert_eq!(naive_sample(sus.view(), &last, 0.0), array![[2.0, 0.0], [2.0, 0.0]]);
        assert_eq!(naive_sample(array![[4.0]].view(), &array![2.0], 0.5), array![[3.0]]);
    }

    #[test]
    fn naive_samples_are_convex_and_counted() {
        let ctx = Array::from_shape_fn((30, 2), |(i, j)| (i as f64 + j as f64).cos());
        let sus = array![[5.0, 0.1], [0.2, -3.0], [0.0, 0.0]];
        let w = window(ctx, sus.clone());
        let last = w.context.row(29).to_owned();
        let out = explain_naive(&ZScoreDetector::default(), &DetectionRule::default(), &w, 50, 4).unwrap();
        assert_eq!(out.samples.len(), 50);
        let rejected = (out.rejection_rate * 50.0).round() as usize;
        assert_eq!(rejected + out.ensemble.len(), 50);
        for s in &out.samples {
            for ((t, d), &v) in s.indexed_iter() {
                let (lo, hi) = if sus[[t, d]] < last[d] { (sus[[t, d]], last[d]) } else { (last[d], sus[[t, d]]) };
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
        let empty = window(Array2::zeros((0, 2)), sus);
        assert!(matches!(explain_naive(&ZScoreDetector::default(), &DetectionRule::default(), &empty, 5, 1), Err(Error::EmptyContext)));
    }

    #[test]
    fn median_examples() {
        let one = vec![array![[1.0, 2.0]]];
        assert_eq!(median_reference(&one).unwrap(), one[0]);
        let three = vec![array![[0.0]], array![[2.0]], array![[1.0]]];
        assert_eq!(median_reference(&three).unwrap(), array![[1.0]]);
        let four = vec![array![[0.0]], array![[3.0]], array![[2.0]], array![[1.0]]];
        assert_eq!(median_reference(&four).unwrap(), array![[1.0]]);
        assert!(matches!(median_reference(&[]), Err(Error::EmptySampleSet)));
    }
}
