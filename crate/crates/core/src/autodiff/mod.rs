//! Reverse-mode differentiation over dense layers, closed under its own
//! reverse pass so gradients of input gradients are available.

mod adam;
pub mod checkpoint;
pub mod elementwise;
mod graph;
mod mlp;

pub use adam::{adam_step, AdamState};
pub use graph::{GradientBundle, Graph, Var};
pub use mlp::{
    input_gradient, spectral_norm, Activation, BoundLayer, BoundMlp, Init, Layer, MlpParams,
    ParamTensors,
};
#[allow(unused_imports)]
pub(crate) use mlp::gaussian_matrix;
