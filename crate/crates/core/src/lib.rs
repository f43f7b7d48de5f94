//! Cumulative training of class-incremental networks grown by
//! function-preserving morphisms, with filter pruning, training-cost
//! accounting and robustness evaluation.

pub mod complexity;
pub mod curriculum;
pub mod data;
pub mod engine;
pub mod error;
pub mod morph;
pub mod par;
pub mod prune;
pub mod robustness;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
