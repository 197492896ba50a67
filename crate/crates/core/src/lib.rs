//! Small-scale convolutional training engine with white-paper probe
//! regularization.
//!
//! The crate bundles everything needed to run the method end to end on a
//! single CPU: a reverse-mode autodiff tape ([`autodiff`]), classifier
//! builders ([`model`]), an SGD training loop that interleaves real-image
//! epochs with probabilistic white-paper phases ([`train`], [`wp`]), and the
//! measurement tools used to study its effect ([`diagnostics`],
//! [`robustness`], [`data`]).

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
mod error;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod robustness;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod wp;

pub use error::{Error, Result};
pub use tensor::Tensor;
