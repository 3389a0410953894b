//! Decomposition-ensemble forecasting for univariate price series.
//!
//! A series is split into band-limited modes with variational mode
//! decomposition, every mode gets its own patch attention forecaster, and
//! the per-mode forecasts are summed back into a forecast of the original
//! series. Training can weight each mode's loss by a learned, scale-aware
//! weight.

pub mod aswl;
pub mod autodiff;
pub mod baselines;
pub mod error;
pub mod forecaster;
pub mod metrics;
pub mod pipeline;
pub mod series;
pub mod spectral;
pub mod synthetic;
pub mod vmd;

pub use error::{Error, Result};
