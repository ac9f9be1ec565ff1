//! Variational dropout for dense networks, with interchangeable stochastic
//! gradient estimators.
//!
//! The crate trains multilayer perceptrons whose weights carry learnable
//! multiplicative Gaussian noise. The training objective is a minibatch
//! estimate of the variational lower bound; its likelihood term can be
//! realized four ways (deterministic, one weight sample per minibatch, one
//! weight sample per datapoint, or sampling the post-linear activations
//! directly), and the diagnostics module measures how those choices change
//! gradient variance and wall-clock cost.
//!
//! Everything is deterministic given a seed: random numbers come from
//! counter-based streams that can be split per layer, per row, and per
//! draw without sequencing constraints.

pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod layers;
pub mod model;
pub mod optim;
pub mod posterior;
pub mod quad;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use layers::{DenseVariationalLayer, EstimatorMode, ForwardCache, LayerGrads, NoiseModel};
pub use model::{
    classification_error, elbo_minibatch, elbo_value, predict, softmax_cross_entropy, Activation,
    ElboReport, LayerSpec, Mlp, ModelCache, ModelGrads, PredictMode,
};
pub use optim::{AdamConfig, AdamState};
pub use posterior::{DropoutPosterior, Granularity, KlMode, PosteriorKind};
pub use rng::RngStream;
pub use tensor::Matrix;
