//! Differentiable building blocks: a reverse-mode tape over dense matrices, affine stacks,
//! multi-head cross-attention, Adam, a finite-difference gradient checker and the
//! checkpoint container.

mod checkpoint;
mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{Checkpoint, RngState, MAGIC, VERSION};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub use layers::{
    positive_transform, positive_transform_value, Activation, BackboneConfig, Linear, Mlp,
    MultiHeadAttention,
};
pub use optim::{cosine_lr, Adam, AdamState};
pub use params::{Init, ParamId, ParamLayout, ParamSpec, ParamStore, ParamVars};
pub use tensor::{DType, Real, Tensor};
