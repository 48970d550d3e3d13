//! Differentiable building blocks: tensors, parameters, a reverse-mode tape,
//! network blocks, the Adam optimizer, gradient checking and checkpoints.

mod blocks;
mod checkpoint;
mod gradcheck;
mod ops;
mod optim;
mod params;
mod tape;
mod tensor;

pub use blocks::{BlockSpec, Linear, Mlp, MultiHeadAttention, TransformerLayer};
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
pub use gradcheck::{
    analytic_gradients, check_gradients, compare_gradients, GradCheckConfig, GradCheckReport, ParamCheck,
};
pub use ops::{cross_entropy, dot_product_attention, max_pool_agg, softmax};
pub use optim::Adam;
pub use params::{Gradients, Init, ParamId, ParameterStore};
pub(crate) use tape::dot as vec_dot;
pub use tape::{KeySets, Tape, Var, LAYER_NORM_EPSILON, LOG_EPSILON};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },
    #[error("parameter `{0}` registered twice")]
    DuplicateParameter(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("invalid block spec: {0}")]
    InvalidSpec(String),
    #[error("target index {target} outside the support of {len} entries")]
    InvalidTarget { target: usize, len: usize },
    #[error("invalid target distribution: {0}")]
    InvalidDistribution(String),
    #[error("attention needs at least one key")]
    NoKeys,
    #[error("max pooling needs at least one valid row")]
    NoValidRows,
    #[error("checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {reason}")]
    BadCheckpoint { path: String, reason: String },
}
