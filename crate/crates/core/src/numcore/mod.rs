//! Minimal dense linear algebra and reverse-mode gradients.

pub mod gradcheck;
pub mod mlp;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, max_relative_error, numeric_gradient, relative_error};
pub use mlp::{mlp_forward, Activation, Layer, MlpParams, MlpVars};
pub use optim::{Optimizer, OptimizerKind};
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::{dot, norm, squared_distance, Tensor2};
