//! Dense `f64` tensors and a tape-based reverse-mode autograd, with exactly
//! the operators a convolutional segmentation network needs: dilated and
//! strided convolutions, batch normalization, pooling, bilinear resizing and
//! channel-wise broadcasting.
//!
//! Everything runs in 64-bit floats so analytic gradients can be compared
//! against finite differences at tight tolerances. Batch items are processed
//! in parallel but reduced in a fixed order, so results do not depend on the
//! thread count.

mod graph;
mod linalg;
pub mod ops;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use ops::{concat_channels, sum_all, BatchStats, Conv2dOptions, NormMode};
pub use tensor::Tensor;
