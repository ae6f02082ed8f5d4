//! Variational Bayesian image reconstruction with latent-tree scale-mixture
//! priors on orthonormal Haar wavelet coefficients.
//!
//! The pipeline: [`wavelet`] defines the transform `s = B u` and the quad-tree
//! over detail coefficients, [`potentials`] the super-Gaussian penalties,
//! [`tree`] exact inference over the latent high/low states, [`linear`] the
//! matrix-free Gaussian machinery, and [`inference`] the double-loop engine
//! tying them together. [`harness`] implements the experiment driver behind
//! the `treevb` binary.

pub mod error;
pub mod harness;
pub mod inference;
pub mod linear;
pub mod oracle;
pub mod potentials;
pub mod rng;
pub mod selftest;
pub mod tree;
pub mod wavelet;

pub use error::{Error, Result};
pub use inference::{run, Estimator, Hypers, Model, ModelConfig, RunResult};
pub use linear::ObservationOp;
pub use potentials::Potential;
pub use wavelet::{Image, WaveletLayout};
