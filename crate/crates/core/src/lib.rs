//! Outlier-insensitive Kalman filtering.
//!
//! Each potential observation outlier is modelled as a zero-mean Gaussian with an
//! unknown variance (NUV). The variance is estimated online inside the Kalman
//! update step, either by expectation maximization or by alternating
//! maximization, and folded into an inflated observation-noise covariance.
//! When no outlier is detected the update reduces to the standard Kalman filter.
//!
//! Modules:
//! - [`ssmodel`]: linear-Gaussian state-space model, trajectory simulation, outlier injection.
//! - [`kalman`]: standard predict/update.
//! - [`oikf`]: the NUV-EM / NUV-AM update step and the filtering fold.
//! - [`baselines`]: chi-squared innovation gating.
//! - [`eval`]: metrics, grid search and experiment drivers.
//! - [`dataio`]: CSV trajectory and result-table I/O.

pub mod baselines;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod kalman;
pub mod oikf;
pub mod ssmodel;

pub use error::{Error, Result};
pub use kalman::{GaussianBelief, UpdateArtifacts};
pub use oikf::{Engine, FilterRun, OikfConfig, StepDiagnostics, Variant};
pub use ssmodel::{ObservationSeries, OutlierSpec, SignMode, SystemModel};
