//! Reverse-mode autodiff and the Siamese relative-pose network.
//!
//! Tensors carry a leading batch axis. Operations are recorded on a
//! [`Tape`]; one backward pass per tape yields [`Gradients`] keyed by
//! [`ParamId`].

use std::path::PathBuf;

mod checkpoint;
mod loss;
mod model;
mod optim;
mod tape;
mod tensor;
mod train;

pub use checkpoint::{Checkpoint, CheckpointHeader, TensorEntry, FORMAT_VERSION, MAGIC};
pub use loss::{batch_loss, loss, rms, target, M_ROTATION, M_TRANSLATION};
pub use model::{init_uniform, siamese_forward, Bound, LayerSpec, InputNorm, NetworkSpec, Prediction, SiameseModel, CHUNK, OUTPUTS};
pub use optim::{adam_step, lr_at_epoch, AdamConfig, AdamState};
pub use tape::{Gradients, ParamId, ParamStore, Tape, Var};
pub use tensor::{axpy, dot, Tensor};
pub use train::{
    evaluate, identity_baseline, predict_all_pairs, train, EpochMetrics, EvalSummary, TrainConfig, TrainData, TrainError, Trainer,
};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: expected {expected}, got shape {actual:?}")]
    Shape { op: &'static str, expected: String, actual: Vec<usize> },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward already ran on this tape; record a new forward pass")]
    BackwardTwice,
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Stream(#[from] std::io::Error),
}
