//! Lightweight single-image super-resolution: a multi-path residual network
//! built on a small reverse-mode autograd core, with the degradation models,
//! Y-channel metrics, training loop and complexity accounting around it.

pub mod autograd;
pub mod blocks;
pub mod degrade;
pub mod error;
pub mod imaging;
pub mod metrics;
pub mod ops;
pub mod rng;
pub mod tensor;
pub mod training;

pub use autograd::{Eager, Gradients, Graph, Tape, Var};
pub use error::{Error, LoadError, Result};
pub use tensor::{Real, Shape, Tensor};
