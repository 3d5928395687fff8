//! Multi-head attention pooling for acoustic scene classification.
//!
//! A log-Mel frontend feeds a convolutional stack and a bidirectional LSTM;
//! `M` learned head vectors each softmax-weight the resulting frame sequence
//! into one summary, and the concatenated summaries are classified by a small
//! feed-forward network. Everything is trained jointly from clip labels only.
//!
//! The numeric stack is generic over [`numerics::Scalar`] (`f32` or `f64`);
//! the aliases below fix the element type used by the tools.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type Model64 = model::SceneModel<f64>;
pub type Model32 = model::SceneModel<f32>;
