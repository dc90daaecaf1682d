//! Binary convolutional networks with real-valued shortcuts: tensors, packed
//! bit kernels, autodiff, binarization, network construction, training and
//! cost accounting.

pub mod accounting;
pub mod binarize;
pub mod bits;
pub mod capacity;
pub mod data;
pub mod error;
pub mod export;
pub mod format;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod model;
pub mod netspec;
pub mod scalar;
pub mod surrogate;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{RealTensor, Tensor};
