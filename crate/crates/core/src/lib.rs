//! Nonparametric estimation of first-hitting-time densities, survival
//! functions and cure rates for covariate-indexed continuous-time Markov
//! chains observed up to a random censoring step.
//!
//! The pieces, bottom-up:
//!
//! - [`model`]: model specifications and their validation; built-in `model-a` and `model-b`.
//! - [`simulate`] / [`dataset_io`]: censored trajectories and the dataset file format.
//! - [`oracle`]: exact truncated hitting coefficients, densities, cure rates
//!   and reachability for a known model, plus a Monte Carlo cross-check.
//! - [`kernel`] / [`estimate`]: kernel estimators of the holding rate and
//!   the jump matrix, and the plug-in density and cure-rate estimators.
//! - [`bandwidth`]: CPE-based bandwidth selection.
//! - [`risk`]: the replicated risk study and its CSV reports.

pub mod bandwidth;
pub mod dataset_io;
pub mod erlang;
pub mod error;
pub mod estimate;
pub mod expr;
pub mod kernel;
pub mod model;
pub mod oracle;
pub mod risk;
pub mod simulate;

pub use error::{Error, Result};
pub use estimate::{fit, FittedEstimator};
pub use kernel::KernelConfig;
pub use model::ModelSpec;
pub use oracle::{CoefficientTable, MAX_K};
pub use simulate::{Dataset, ObservationRecord};
