//! Counterfactual ensemble explanations for differentiable time-series
//! anomaly detectors.

pub mod detect;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod metrics;
pub mod objective;
pub mod optimize;
pub mod perturb;
pub mod sample;
pub mod serde_array;
pub mod tune;
pub mod types;

pub use error::{Error, Result};
pub use types::{is_valid, make_window, DetectionRule, Ensemble, HyperParams, Member, Method, Origin, TimeSeries, Window};
