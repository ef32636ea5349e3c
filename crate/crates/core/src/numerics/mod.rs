//! Minimal deterministic reverse-mode differentiation with the layers,
//! losses and optimizer the three stages train with.

pub mod gradcheck;
mod graph;
pub mod kernels;
mod layers;
mod optim;
mod params;
pub mod serialize;
mod tensor;

pub use graph::{softmax_axis1, CustomBackward, Graph, StatUpdate, Var};
pub use layers::{BatchNorm, Conv2d, ConvTranspose2d, Linear, Mode};
pub use optim::{AdamW, AdamWConfig, PlateauScheduler};
pub use params::{he_uniform, Gradients, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;

/// Clamp applied to probabilities before taking logs or dividing by them.
pub const CLAMP_EPS: f64 = 1e-7;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("{kind}: shape mismatch ({detail})")]
    ShapeMismatch { kind: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward on a graph built without recording")]
    NotRecording,
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("interaction weight {0} is negative or non-finite")]
    NegativeWeight(f64),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
