//! nanomm: a desk-scale multimodal pre-training engine.
//!
//! A native-resolution vision transformer feeds a tiny causal language model
//! through a 2x2 merging adapter; training couples next-token prediction
//! with an optimal-transport alignment loss over a synthetic shape-caption
//! corpus. Everything — autodiff, rasterizer, optimizer, checkpoints — lives
//! in this crate with no numeric dependencies, so every gradient can be
//! checked against finite differences.

pub mod align;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod lm;
pub mod model;
pub mod params;
pub mod patcher;
pub mod rotary;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
