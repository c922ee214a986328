//! Normalizing-flow pullback geometry learned from corrupted measurements.
//!
//! The crate trains a constant-Jacobian-determinant normalizing flow jointly
//! with a Gaussian-head posterior network against linearly corrupted, noisy
//! observations, turns the learned diffeomorphism into closed-form Riemannian
//! structure (distances, geodesics, exp/log maps, barycenters), compresses it
//! into a tangent-space autoencoder, and uses that decoder as a certified
//! prior for inverse problems.
//!
//! Modules map onto the pipeline stages:
//!
//! - [`tensor`] / [`tape`]: dense f64 arrays with reverse- and forward-mode
//!   differentiation over a fixed primitive set.
//! - [`flow`]: the diffeomorphism (additive tanh-polynomial couplings and LU
//!   linear layers), its exact inverse, log-determinant, and density.
//! - [`geometry`]: pullback mappings induced by a flow.
//! - [`rae`]: tangent-space autoencoder construction and projection-error
//!   estimators.
//! - [`corruption`] / [`dataset`]: forward operators, noise, synthetic and
//!   MNIST data.
//! - [`posterior`]: the conditional Gaussian-head density and its sampler.
//! - [`training`]: the variational objective and Adam loop.
//! - [`inversion`]: decoder-prior gradient descent, smoothness constants,
//!   convergence certificates, isometry checkers, and the TV baseline.
//! - [`metrics`]: Wasserstein-1 estimators, MSE, and the recoverability
//!   bound evaluator.

/// Seeded RNG types used across the crate, re-exported for callers that
/// build models deterministically.
pub mod rng {
    pub use rand_chacha::rand_core::SeedableRng;
    pub use rand_chacha::ChaCha8Rng;
}

pub mod corruption;
pub mod dataset;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod inversion;
pub mod linalg;
pub mod metrics;
pub mod numdiff;
pub mod posterior;
pub mod rae;
pub mod stats;
pub mod tape;
pub mod tensor;
pub mod training;

pub use corruption::{CorruptionModel, LinearOperator};
pub use dataset::Dataset;
pub use error::{Error, Result};
pub use flow::FlowModel;
pub use geometry::PullbackGeometry;
pub use inversion::{ConvergenceCertificate, DecoderSmoothness};
pub use metrics::W1Estimate;
pub use posterior::PosteriorModel;
pub use rae::{ProjectionErrorReport, Rae};
pub use tape::{Gradients, Tape, VarId};
pub use tensor::Tensor;
pub use training::{TrainConfig, TrainState};
