//! Hebbian principal-subspace pre-training followed by supervised linear
//! probes, with the tensor kernels, layers, optimizer and experiment runner
//! needed to compare it against plain backpropagation on small label budgets.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod hebbian;
pub mod layers;
pub mod oracle;
pub mod rng;
pub mod sgd;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
