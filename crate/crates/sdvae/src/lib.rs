//! Semi-supervised disentangled VAE: tape autodiff, distribution ops,
//! inverse autoregressive flows, the SDVAE objectives, training, and data
//! handling.

pub mod autodiff;
pub mod data;
pub mod distributions;
pub mod flow;
pub mod model;
pub mod trainer;

pub use autodiff::{AdError, NodeId, Tape};
pub use distributions::{CategoricalPosterior, GaussianPosterior, NoiseSample, NoiseSource};
pub use model::{
    Arch, Batch, BaselineMode, Bound, LossBreakdown, ModelError, ModelParams, NoiseBundle,
    ObjectiveConfig,
};
pub use trainer::{TrainingConfig, Variant};
