//! Any-shot object detection on synthetic scenes: semantic-prototype
//! alignment, a penalty-rebalanced focal loss, two-stage training and
//! zero-/few-/any-shot evaluation.

pub mod alignment;
pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod loss;
pub mod semantics;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
