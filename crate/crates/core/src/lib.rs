//! Poisson latent-factor state-space models of age-structured death counts,
//! fitted in one step by black-box variational inference.
//!
//! The crate is organised bottom-up:
//!
//! * [`tape`] and [`density`]: reverse-mode differentiation and the Gaussian
//!   and Poisson kernels built on it.
//! * [`hmd`] and [`panel`]: Human Mortality Database ingestion, aligned
//!   deaths/exposure panels and rolling train/evaluation windows.
//! * [`model`]: latent level/trend dynamics, affine and radial-basis emission
//!   maps and the joint log-density.
//! * [`guide`]: the autoregressive Gaussian approximate posterior.
//! * [`inference`]: ELBO estimation, gradient estimators and the optimiser.
//! * [`forecast`]: closed-form latent propagation and predictive deaths.
//! * [`scoring`]: log-score, R² and the rolling-window harness.
//! * [`baselines`]: the Poisson Lee-Carter model.

pub mod baselines;
pub mod checkpoint;
pub mod density;
pub mod error;
pub mod forecast;
pub mod guide;
pub mod hmd;
pub mod inference;
pub mod model;
pub mod panel;
pub mod scoring;
pub mod tape;

pub use error::{Error, Result};
pub use forecast::{LatentForecast, PredictiveDeaths};
pub use guide::GuideParams;
pub use inference::{FitResult, TrainConfig};
pub use model::{EmissionParams, LatentDynamicsParams, LatentPath, ModelParams, ModelSpec};
pub use panel::{MortalityPanel, WindowSpec};
pub use scoring::ScoreReport;
