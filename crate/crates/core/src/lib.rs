//! Desk-scale laboratory for contrastive language-image pre-training with
//! multi-branch image encoders, multi-positive objectives, and a synthetic
//! (image, multi-texts) data pipeline.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod losses;
pub mod matching;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
