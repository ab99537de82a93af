//! Few-shot image classification with self-promoted dense supervision for
//! vision transformers.

pub mod augment;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod meta_train;
pub mod meta_tune;
pub mod nn;
pub mod par;
pub mod seed;
pub mod supervision;
pub mod tensor;

pub use error::{Error, Result};
