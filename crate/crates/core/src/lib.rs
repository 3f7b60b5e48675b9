//! Numerical toolkit for the mean-field game of equity cross-holding under
//! common noise.
//!
//! The crate is organised around the two time settings of the game:
//!
//! - [`model`], [`fredholm`] and [`oneperiod`] cover the one-period game:
//!   atomized laws, the conditional-mean field equation, mean–variance best
//!   responses, equilibrium construction, no-arbitrage certificates and the
//!   finite-population simulator.
//! - [`ctsim`] and [`bsde`] cover the continuous-time Black–Scholes family:
//!   particle simulation under a shared common-noise path, the
//!   no-increasing-profit estimator, the reduced-control correspondence and
//!   the log/power utility equilibria (the latter through a quadratic BSDE).
//!
//! [`scenario`] parses the structured scenario files used by the CLI and
//! [`io`] holds the CSV and binary table writers.

pub mod bsde;
pub mod ctsim;
pub mod fredholm;
pub mod io;
pub mod linalg;
pub mod model;
pub mod oneperiod;
pub mod rng;
pub mod scenario;
pub mod stats;

pub use fredholm::{FieldDecomposition, UniquenessReport};
pub use model::{AtomLaw, HoldingKernel, MultiplierVector, NoiseQuadrature, OnePeriodModel};

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
