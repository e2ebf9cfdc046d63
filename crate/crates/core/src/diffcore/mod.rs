//! Minimal differentiable computation kit: tensors, a reverse-mode tape,
//! layers, losses, AdamW and finite-difference gradient checking.

mod checkpoint;
mod gradcheck;
mod graph;
mod layers;
mod loss;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use gradcheck::{gradient_check, relative_error, GradCheckOptions, GradCheckReport, GRADCHECK_TOLERANCE};
pub use graph::{Graph, Var, SNAKE_EPS};
pub use layers::{
    positional_encoding, time_features, Activation, AttentionBlock, Conv1d, LayerNorm, Linear, SnakeBeta,
    TransformerStack, TransposedConv1d,
};
pub use loss::{cross_entropy, mae_loss, mse_loss, one_hot, uniform_rows};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
