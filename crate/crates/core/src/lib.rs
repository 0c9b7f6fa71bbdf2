//! Covariate-adaptive multiple testing on z-values with false discovery
//! rate control.
//!
//! The procedures work on u-values `U = Φ(Z)` and a three-component beta
//! mixture working model. [`asymp`] ranks hypotheses by the fitted assessor
//! and calibrates a threshold with Monte-Carlo mirror statistics. [`finite`]
//! masks u-values as `{U, Ǔ}` pairs and reveals them one by one, which gives
//! finite-sample FDR control.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the precision.

pub mod asymp;
pub mod em;
pub mod error;
pub mod finite;
pub mod masking;
pub mod model;
pub mod numeric;
pub mod oracle;
pub mod rejection;
pub mod scalar;
pub mod simulation;

pub use error::{Result, ZapError};
pub use model::{BetaMixtureParams, LocalMixture, Side, TestingInput};
pub use numeric::{EmpiricalSample, UnitInterval};
pub use rejection::RejectionResult;
pub use scalar::Scalar;

pub type InputF64 = TestingInput<f64>;
pub type InputF32 = TestingInput<f32>;
pub type ParamsF64 = BetaMixtureParams<f64>;
pub type ParamsF32 = BetaMixtureParams<f32>;
pub type RejectionF64 = RejectionResult<f64>;
