//! Random embedding ensembles with sparse and normalized columns.
//!
//! The crate samples approximately sparse, exactly sparse, dense and
//! column-normalized random matrices, measures their distortion
//! `sup_{x in T} | ||Ax||_2 - lambda ||x||_2 |` over structured test sets,
//! estimates Gaussian width and complexity, and compares everything against
//! exact brute-force oracles.
//!
//! Module map:
//!
//! - [`ensembles`]: matrix distributions, sampling, matrix-vector products.
//! - [`testsets`]: the sets `T` and their sup-oracles.
//! - [`complexity`]: Monte Carlo Gaussian width / complexity.
//! - [`isometry`]: distortion trials, increments, empirical subgaussian norms.
//! - [`oracles`]: exact pmf sums, enumerations and quadratures.
//! - [`experiments`]: end-to-end sweeps and report emission.

pub mod complexity;
pub mod ensembles;
pub mod error;
pub mod experiments;
pub mod isometry;
pub mod oracles;
pub mod rng;
pub mod stats;
pub mod testsets;

pub use complexity::{estimate_complexity, estimate_width, WidthEstimate, WidthKind};
pub use ensembles::{sample_matrix, Column, ColumnMatrix, EnsembleSpec, Variant};
pub use error::{Error, Result};
pub use isometry::{isometry_trials, DistortionReport, Psi2Fit, Psi2Method};
pub use rng::SeedPath;
pub use testsets::{SetKind, TestSet};
