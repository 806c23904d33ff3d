//! Merge independently fine-tuned expert MLPs into one multi-task backbone,
//! measure per-layer representation bias against the experts, and train
//! per-task adapter stacks that correct it.

pub mod bias;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod merge;
pub mod nn;
pub mod pipeline;
pub mod report;
pub mod seed;
pub mod summary;
pub mod surgery;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{l1_mean_distance, ParamSet, Tensor};
