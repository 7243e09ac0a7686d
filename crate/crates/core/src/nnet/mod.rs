//! Minimal tensor and backpropagation substrate.
//!
//! Networks are sequential stacks of [`LayerSpec`]s. Gradients are computed
//! layer by layer from a tape recorded during [`Network::forward`]. The
//! element type is generic so that the same code can run in `f64` for
//! finite-difference checks.

mod checkpoint;
mod gradcheck;
mod layers;
mod loss;
mod network;
mod optim;
mod tensor;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
};
pub(crate) use checkpoint::write_atomic;
pub use gradcheck::{
    grad_check, grad_check_network, grad_check_sampled, GradCheckReport, NetworkObjective,
    Objective, MAX_EXHAUSTIVE_PARAMS,
};
pub use layers::LayerSpec;
pub use loss::{mse_loss, softmax_cross_entropy, sum_loss, Loss};
pub use network::Network;
pub use optim::{adam_step, sgd_step, OptimizerKind, OptimizerState};
pub use tensor::{Param, Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("layer {index} ({kind}): {msg}")]
    Layer {
        index: usize,
        kind: &'static str,
        msg: String,
    },
    #[error("backward called without a preceding forward")]
    NoForward,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("non-finite gradient in parameter {param} at element {index}")]
    NanGradient { param: String, index: usize },
    #[error("parameter {0} has no gradient")]
    MissingGradient(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Writes a network's parameters (plus any extra records) as a checkpoint.
pub fn save_network(path: &std::path::Path, net: &Network<f32>, extra: &[(String, Tensor<f32>)]) -> Result<(), NnError> {
    let mut records = net.state();
    records.extend(extra.iter().cloned());
    save_checkpoint(path, &records)
}
