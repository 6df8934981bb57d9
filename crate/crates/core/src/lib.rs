//! Simulation and analysis of two-mode squeezed microwave radiation generated by a
//! traveling-wave parametric amplifier (TWPA).
//!
//! The crate is organized along the measurement pipeline:
//!
//! - [`gaussian`]: lossy two-mode-squeezed covariance matrices and entanglement/squeezing
//!   figures of merit (symplectic eigenvalue, logarithmic negativity, entropy of formation).
//! - [`detection`]: forward model of the heterodyne chain (added noise, gain, volt
//!   conversion) and seeded sampling of pump-on/pump-off acquisitions.
//! - [`estimator`]: covariance reconstruction with on/off subtraction, batch-means
//!   uncertainties with jackknife metric errors, differential histograms and repeated-experiment stability studies.
//! - [`sntj`]: shot-noise tunnel junction noise model and the three-parameter gain fit.
//! - [`experiment`]: configuration and the end-to-end commands used by the CLI.
//!
//! Covariance matrices use the convention where the two-mode vacuum is the identity.

#![forbid(unsafe_code)]
// `!(x > 0.0)` bound checks reject NaN on purpose; small fixed-size loops index directly;
// the operating-point squeezing r = 0.5235 is not π/6
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::approx_constant
)]

pub mod constants;
pub mod detection;
mod error;
pub mod estimator;
pub mod experiment;
pub mod gaussian;
pub mod sntj;

pub use error::{Error, Result};
