//! Truncated Milstein integration for stochastic differential equations whose
//! drift and diffusion grow super-linearly, driven by commutative noise.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] holds SDE instances, the `L^{j1} g_{j2}` operator and sampling
//!   based diagnostics for commutativity and the growth assumptions.
//! * [`truncation`] implements the `(mu, h)` truncation machinery: policy
//!   admissibility, the radial projection and the truncated coefficient maps.
//! * [`brownian`] produces deterministic, counter-keyed Brownian increments and
//!   coarsens them exactly so fine and coarse solvers share one path.
//! * [`scheme`] contains the one-step maps (truncated and classical Milstein,
//!   truncated Euler-Maruyama, Euler-Maruyama) and the path driver.
//! * [`experiments`] is the Monte Carlo harness: strong errors on coupled
//!   paths, log-log order fitting and moment sweeps.
//! * [`config`] is the configuration and artifact layer behind the
//!   `tmilstein` binary.

pub mod brownian;
pub mod config;
mod error;
pub mod experiments;
pub mod model;
pub mod scheme;
pub mod truncation;

pub use brownian::{BrownianPath, PathGrid};
pub use error::{Error, Result};
pub use model::{SdeSystem, StateVector};
pub use scheme::{Scheme, Trajectory};
pub use truncation::{AdmissiblePolicy, TruncationContext, TruncationPolicy};

/// Euclidean norm of a slice.
pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}
