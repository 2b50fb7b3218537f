//! Unit-level small area estimation with distributional regression.
//!
//! This crate fits multi-parameter distributions whose parameters each
//! carry their own regression, with area random intercepts, and turns
//! the fitted model into small area predictions of arbitrary functionals
//! with bootstrap uncertainty:
//!
//! - [`dist`]: response families (Normal, Log-Normal, Dagum, Gamma) with
//!   densities, quantiles, sampling and score functions.
//! - [`model`]: datasets, model specifications and design construction.
//! - [`fit`]: penalized scoring and Gauss-Hermite EM fitters, plus fit
//!   diagnostics.
//! - [`predict`]: Monte Carlo prediction of area functionals.
//! - [`mse`]: parametric bootstrap mean squared error estimation.
//! - [`eblup`]: the nested-error linear baseline with optional Box-Cox
//!   transformation.
//! - [`simulate`]: model-based simulation scenarios and their evaluation
//!   metrics.

pub mod dist;
pub mod eblup;
mod error;
pub mod fit;
pub mod model;
pub mod mse;
pub mod numeric;
pub mod predict;
pub mod rng;
pub mod simulate;

pub use error::{Error, Result};
