//! Series, windows, detection rules, ensembles and run configuration.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::serde_array;

/// A multivariate series of `T` timestamps and `D` dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub name: String,
    #[serde(with = "serde_array::matrix")]
    pub values: Array2<f64>,
    pub labels: Option<Vec<u8>>,
}

impl TimeSeries {
    pub fn new(name: impl Into<String>, values: Array2<f64>, labels: Option<Vec<u8>>) -> Result<Self> {
        let (t, d) = values.dim();
        if t == 0 || d == 0 {
            return Err(Error::invalid("values", "series needs T >= 1 and D >= 1"));
        }
        if let Some(l) = &labels {
            if l.len() != t {
                return Err(Error::shape(format!("{t} labels"), format!("{} labels", l.len())));
            }
            if l.iter().any(|&v| v > 1) {
                return Err(Error::invalid("labels", "labels must be 0 or 1"));
            }
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                row: pos / d,
                column: pos % d,
            });
        }
        Ok(Self {
            name: name.into(),
            values,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dims(&self) -> usize {
        self.values.ncols()
    }

    /// Contiguous sub-series `[start, end)`, labels included.
    pub fn slice(&self, start: usize, end: usize) -> TimeSeries {
        TimeSeries {
            name: self.name.clone(),
            values: self.values.slice(s![start..end, ..]).to_owned(),
            labels: self.labels.as_ref().map(|l| l[start..end].to_vec()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Origin {
    pub series: String,
    /// Index of the first suspect timestamp in the source series.
    pub start: usize,
}

/// `W = [W_C, W_S]`: a fixed context followed by the suspect segment the
/// detector labels and the explainers modify.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    #[serde(with = "serde_array::matrix")]
    pub context: Array2<f64>,
    #[serde(with = "serde_array::matrix")]
    pub suspect: Array2<f64>,
    pub origin: Origin,
}

impl Window {
    pub fn new(context: Array2<f64>, suspect: Array2<f64>, origin: Origin) -> Result<Self> {
        if suspect.nrows() == 0 {
            return Err(Error::invalid("suspect", "suspect length must be >= 1"));
        }
        if suspect.ncols() == 0 {
            return Err(Error::invalid("suspect", "window needs at least one dimension"));
        }
        if context.ncols() != suspect.ncols() && context.nrows() > 0 {
            return Err(Error::shape(
                format!("{} context dimensions", suspect.ncols()),
                context.ncols(),
            ));
        }
        if context.iter().chain(suspect.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("window", "values must be finite"));
        }
        let context = if context.nrows() == 0 {
            Array2::zeros((0, suspect.ncols()))
        } else {
            context
        };
        Ok(Self {
            context,
            suspect,
            origin,
        })
    }

    /// Suspect length `S`.
    pub fn suspect_len(&self) -> usize {
        self.suspect.nrows()
    }

    pub fn context_len(&self) -> usize {
        self.context.nrows()
    }

    /// Total length `L`.
    pub fn len(&self) -> usize {
        self.context.nrows() + self.suspect.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> usize {
        self.suspect.ncols()
    }

    /// The full `L x D` window.
    pub fn full(&self) -> Array2<f64> {
        concatenate(Axis(0), &[self.context.view(), self.suspect.view()])
            .expect("context and suspect share their column count")
    }

    /// Same context, different suspect values.
    pub fn with_suspect(&self, suspect: Array2<f64>) -> Window {
        debug_assert_eq!(suspect.dim(), self.suspect.dim());
        Window {
            context: self.context.clone(),
            suspect,
            origin: self.origin.clone(),
        }
    }

    pub fn check_suspect_shape(&self, m: &ArrayView2<f64>) -> Result<()> {
        if m.dim() != self.suspect.dim() {
            return Err(Error::shape(
                format!("{:?}", self.suspect.dim()),
                format!("{:?}", m.dim()),
            ));
        }
        Ok(())
    }
}

/// Cut the window whose suspect part starts at `suspect_start`.
pub fn make_window(
    series: &TimeSeries,
    suspect_start: usize,
    suspect_len: usize,
    context_len: usize,
) -> Result<Window> {
    let end = suspect_start + suspect_len;
    if suspect_len == 0 || suspect_start < context_len || end > series.len() {
        return Err(Error::OutOfBounds {
            start: suspect_start,
            end,
            context: context_len,
            len: series.len(),
        });
    }
    let context = series
        .values
        .slice(s![suspect_start - context_len..suspect_start, ..])
        .to_owned();
    let suspect = series.values.slice(s![suspect_start..end, ..]).to_owned();
    Window::new(
        context,
        suspect,
        Origin {
            series: series.name.clone(),
            start: suspect_start,
        },
    )
}

/// Threshold `theta` on per-timestamp anomaly scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRule {
    theta: f64,
}

impl DetectionRule {
    pub fn new(theta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&theta) {
            return Err(Error::invalid("theta", format!("{theta} is outside [0, 1]")));
        }
        Ok(Self { theta })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// A timestamp is anomalous when its score reaches the threshold.
    pub fn is_anomalous(&self, score: f64) -> bool {
        score >= self.theta
    }
}

impl Default for DetectionRule {
    fn default() -> Self {
        Self { theta: 0.5 }
    }
}

/// True iff every score is strictly below the threshold.
pub fn is_valid(scores: &Array1<f64>, rule: &DetectionRule) -> bool {
    scores.iter().all(|&s| s < rule.theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Dpe,
    Ice,
    SparseDpe,
    SparseIce,
    Fs,
    Naive,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Dpe,
        Method::Ice,
        Method::SparseDpe,
        Method::SparseIce,
        Method::Fs,
        Method::Naive,
    ];

    pub fn is_gradient(self) -> bool {
        !matches!(self, Method::Fs | Method::Naive)
    }

    pub fn is_sparse(self) -> bool {
        matches!(self, Method::SparseDpe | Method::SparseIce)
    }

    /// Whether the variant runs the blur operator (and so uses `sigma_max`).
    pub fn uses_blur(self) -> bool {
        matches!(self, Method::Dpe | Method::SparseDpe)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Dpe => "dpe",
            Method::Ice => "ice",
            Method::SparseDpe => "sparse-dpe",
            Method::SparseIce => "sparse-ice",
            Method::Fs => "fs",
            Method::Naive => "naive",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid("method", format!("unknown method `{s}`")))
    }
}

/// One counterfactual suspect window and the scores it received.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    #[serde(with = "serde_array::matrix")]
    pub suspect: Array2<f64>,
    #[serde(with = "serde_array::vector")]
    pub scores: Array1<f64>,
    pub rank: usize,
    /// Perturbation map that produced the member (blur variants).
    #[serde(default, skip_serializing_if = "Option::is_none", with = "serde_array::matrix_opt")]
    pub map: Option<Array2<f64>>,
    /// Dimension selector `w` (sparse variants).
    #[serde(default, skip_serializing_if = "Option::is_none", with = "serde_array::vector_opt")]
    pub selector: Option<Array1<f64>>,
}

impl Member {
    pub fn new(suspect: Array2<f64>, scores: Array1<f64>, rank: usize) -> Self {
        Self {
            suspect,
            scores,
            rank,
            map: None,
            selector: None,
        }
    }

    pub fn max_score(&self) -> f64 {
        self.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Valid counterfactuals for one anomaly, in generation order. An empty
/// ensemble records a failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub method: Method,
    pub members: Vec<Member>,
}

impl Ensemble {
    pub fn empty(method: Method) -> Self {
        Self {
            method,
            members: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn suspects(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.members.iter().map(|m| &m.suspect)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    pub lambda1: f64,
    pub lambda2: f64,
    #[serde(rename = "lambdaT")]
    pub lambda_t: f64,
    pub sigma_max: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub margin_c: f64,
    pub max_ensemble: usize,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self::defaults_for(Method::Ice)
    }
}

impl HyperParams {
    /// Default configuration of each explainer variant.
    pub fn defaults_for(method: Method) -> Self {
        let base = HyperParams {
            lambda1: 0.01,
            lambda2: 0.01,
            lambda_t: 0.01,
            sigma_max: 3.0,
            learning_rate: 0.1,
            iterations: 1000,
            margin_c: 0.0,
            max_ensemble: 100,
            seed: 0,
        };
        match method {
            Method::Dpe => HyperParams {
                lambda1: 0.0,
                lambda2: 0.1,
                learning_rate: 0.01,
                ..base
            },
            Method::SparseDpe => HyperParams {
                lambda2: 0.1,
                learning_rate: 0.01,
                ..base
            },
            _ => base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambdaT", self.lambda_t),
            ("sigma_max", self.sigma_max),
            ("learning_rate", self.learning_rate),
            ("margin_c", self.margin_c),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(Error::invalid(name, "must be finite"));
            }
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambdaT", self.lambda_t),
            ("sigma_max", self.sigma_max),
        ] {
            if v < 0.0 {
                return Err(Error::invalid(name, "must be >= 0"));
            }
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::invalid("learning_rate", "must be > 0"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations", "must be >= 1"));
        }
        if self.max_ensemble == 0 {
            return Err(Error::invalid("max_ensemble", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.margin_c) {
            return Err(Error::invalid("margin_c", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};

    fn ramp(t: usize, d: usize) -> TimeSeries {
        let values = Array::from_shape_fn((t, d), |(i, j)| (i * 10 + j) as f64);
        TimeSeries::new("ramp", values, None).unwrap()
    }

    #[test]
    fn window_with_figure_context() {
        let series = ramp(200, 1);
        let w = make_window(&series, 115, 10, 115).unwrap();
        assert_eq!(w.len(), 125);
        assert_eq!(w.suspect_len(), 10);
        assert_eq!(w.suspect[[0, 0]], 1150.0);
        assert_eq!(w.suspect[[9, 0]], 1240.0);
        assert_eq!(w.origin.start, 115);
    }

    #[test]
    fn window_without_context() {
        let series = ramp(20, 2);
        let w = make_window(&series, 4, 3, 0).unwrap();
        assert_eq!(w.context_len(), 0);
        assert_eq!(w.context.ncols(), 2);
        assert_eq!(w.suspect, series.values.slice(s![4..7, ..]));
    }

    #[test]
    fn window_too_close_to_start() {
        let series = ramp(50, 1);
        assert!(matches!(
            make_window(&series, 5, 3, 10),
            Err(Error::OutOfBounds { .. })
        ));
        assert!(matches!(
            make_window(&series, 45, 10, 10),
            Err(Error::OutOfBounds { .. })
        ));
    }

    #[test]
    fn window_is_a_pure_slice() {
        let series = ramp(60, 3);
        let w = make_window(&series, 30, 7, 12).unwrap();
        assert_eq!(w.full(), series.values.slice(s![18..37, ..]));
    }

    #[test]
    fn validity_is_strict() {
        let rule = DetectionRule::new(0.5).unwrap();
        assert!(is_valid(&array![0.1, 0.2], &rule));
        assert!(!is_valid(&array![0.1, 0.5], &rule));
        let zero = DetectionRule::new(0.0).unwrap();
        assert!(!is_valid(&array![0.0, 0.0], &zero));
    }

    #[test]
    fn rule_range() {
        assert!(DetectionRule::new(1.1).is_err());
        assert!(DetectionRule::new(-0.1).is_err());
        assert!(DetectionRule::new(f64::NAN).is_err());
    }

    #[test]
    fn series_rejects_bad_input() {
        let v = array![[1.0], [f64::INFINITY]];
        assert!(matches!(
            TimeSeries::new("x", v, None),
            Err(Error::NonFiniteValue { row: 1, column: 0 })
        ));
        let v = array![[1.0], [2.0]];
        assert!(TimeSeries::new("x", v, Some(vec![0])).is_err());
    }

    #[test]
    fn default_hyperparams() {
        let ice = HyperParams::defaults_for(Method::Ice);
        assert_eq!((ice.learning_rate, ice.lambda1, ice.lambda2, ice.lambda_t), (0.1, 0.01, 0.01, 0.01));
        assert_eq!((ice.iterations, ice.max_ensemble, ice.margin_c), (1000, 100, 0.0));
        let dpe = HyperParams::defaults_for(Method::Dpe);
        assert_eq!((dpe.sigma_max, dpe.learning_rate, dpe.lambda2, dpe.lambda_t), (3.0, 0.01, 0.1, 0.01));
        ice.validate().unwrap();
        dpe.validate().unwrap();
        let bad = HyperParams {
            learning_rate: 0.0,
            ..ice
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
    }
}
