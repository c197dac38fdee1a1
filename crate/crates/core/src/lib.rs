//! Relational forward models for multi-agent gridworlds.

pub mod analysis;
pub mod cli;
pub mod data;
pub mod envs;
pub mod error;
pub mod graph;
pub mod nn;
pub mod policies;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
