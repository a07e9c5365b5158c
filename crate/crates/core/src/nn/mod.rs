//! Minimal trainable-function toolkit: conv / SiLU / dense layers with
//! hand-derived gradients, two losses, AdamW, and a binary checkpoint
//! format. There is no general autograd; each network records what its
//! own backward pass needs.

mod checkpoint;
mod conv;
mod layers;
mod net;
mod optim;
mod params;

use thiserror::Error;

use crate::grid::GridError;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, read_checkpoint, write_checkpoint, StoredParam, MAGIC,
    VERSION,
};
pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvShape};
pub use layers::{
    dense_backward, dense_forward, mse_loss, silu, silu_backward, silu_forward, silu_grad,
    sinusoidal_time_embedding, softmax_cross_entropy, weighted_softmax_cross_entropy,
};
pub use net::{ConvNet, ConvNetConfig, Tape};
pub use optim::{adamw_update, OptimizerConfig};
pub use params::{Init, ParamId, ParamStore};

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("expected {expected} input channels, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("kernel size must be odd, got {0}")]
    EvenKernel(usize),
    #[error("parameter shape error: {0}")]
    ParamShape(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("embedding dimension must be even and positive, got {0}")]
    OddEmbeddingDim(usize),
    #[error("backward called before any forward pass was recorded")]
    BackwardBeforeForward,
    #[error("optimizer step with stale or cleared gradients")]
    StaleGradients,
    #[error("invalid optimizer config: {0}")]
    InvalidOptimizer(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("checkpoint does not match model architecture: {0}")]
    ArchitectureMismatch(String),
    #[error("io error: {0}")]
    Io(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

impl From<std::io::Error> for NnError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            NnError::Checkpoint("truncated checkpoint".into())
        } else {
            NnError::Io(e.to_string())
        }
    }
}
