//! Batch-independent weight standardization for convolutional networks.

pub mod autograd;
pub mod cli;
pub mod data;
pub mod error;
pub mod init;
pub mod layers;
pub mod normalize;
pub mod statlab;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
