//! Differentiable computation core: tensors, the reverse-mode tape, the Adam
//! optimizer, and learning-rate schedules.

pub mod adam;
pub mod kernels;
pub mod scalar;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, OptimError};
pub use scalar::{DType, Scalar};
pub use schedule::{Schedule, ScheduleError};
pub use tape::{Gradients, NodeId, Tape, TapeError};
pub use tensor::Tensor;
