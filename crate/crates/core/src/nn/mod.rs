//! Tensors, differentiable primitives and the hourglass model.

pub mod blocks;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod ops;
pub mod tensor;

pub use blocks::{BlockKind, ResidualBlock};
pub use gradcheck::{check_module, GradcheckOptions, GradcheckReport};
pub use layers::Module;
pub use model::{HourglassModel, ModelConfig, HEAD_PREFIX};
pub use ops::Mode;
pub use tensor::{Float, Param, Tensor};
