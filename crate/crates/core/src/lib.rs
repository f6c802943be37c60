//! Planning and simulation for pipeline- and tensor-parallel training.

// Negated float comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod comm;
pub mod commands;
pub mod config;
pub mod error;
pub mod exec;
pub mod memory;
pub mod model_graph;
pub mod partition;
pub mod pipeline;
pub mod synth;
pub mod tensor_parallel;
pub mod topology;

pub use error::{Error, Result};
