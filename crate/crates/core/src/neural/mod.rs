//! Small dense-tensor network stack: strided 2D/1D convolution, fully
//! connected layers, ReLU, sigmoid, dropout, binary cross-entropy, Adam and
//! an early-stopping training loop.

pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

use thiserror::Error;

pub use loss::{bce_grad, bce_loss, BCE_EPS};
pub use model::{build_model, Gradients, InputKind, LayerSpec, Mode, Model, ModelName, ModelSpec, ParamShape, Trace};
pub use optim::{adam_step, Adam, AdamConfig, AdamState};
pub use tensor::Tensor;
pub use train::{train, train_with_progress, EpochRecord, Example, TrainConfig, TrainOutcome};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeuralError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unknown model '{0}'")]
    UnknownModel(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid training config: {0}")]
    Config(String),
}
