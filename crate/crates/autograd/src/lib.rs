//! Minimal reverse-mode automatic differentiation over dense row-major CPU
//! tensors, with the handful of ops a small convolutional U-Net needs.
//!
//! Every op eagerly computes its value; when any input is trainable (and
//! recording is not disabled with [`no_grad`]) it also records a closure
//! producing the input gradients. [`Tensor::backward`] walks that graph once.

mod conv;
mod float;
pub mod io;
mod linalg;
pub mod nn;
mod norm;
mod ops;
pub mod optim;
mod shape;
mod tensor;

pub use float::Float;
pub use nn::Module;
pub use tensor::{no_grad, numel, GradStore, Tensor};
