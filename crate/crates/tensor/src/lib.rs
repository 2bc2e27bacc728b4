//! Reverse-mode automatic differentiation over real and complex image stacks.
//!
//! A [`Graph`] records every operation as it is evaluated. `backward` walks the
//! tape in reverse and returns gradients for every leaf marked as requiring
//! them. Complex gradients follow the convention `dL/dRe + i dL/dIm`.

mod broadcast;
mod error;
pub mod gradcheck;
mod graph;
pub mod ops;
mod scalar;
mod tensor;

pub use broadcast::broadcast_shape;
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, rel_err, GradCheckReport};
pub use graph::{BinaryKind, Gradients, Graph, PadMode, Separable, UnaryKind, Value, Var};
pub use ops::conv::{bilinear_kernel_4x4, ConvAlgo, Padding};
pub use ops::fft::fft2_planes;
pub use ops::norm::{RunningStats, BN_EPS, BN_MOMENTUM};
pub use scalar::Scalar;
pub use tensor::{DType, Tensor};
pub use num_complex::Complex;
