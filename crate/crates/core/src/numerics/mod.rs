//! Dense tensors, reverse-mode differentiation and the Adam update rule.

pub mod adam;
pub mod tape;
pub mod tensor;

pub use adam::{sgd_step, AdamConfig, AdamState};
pub use tape::{sigmoid, softmax_rows, Gradients, ParamKey, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
