//! Hierarchical attention network for multi-lead ECG classification:
//! beat, rhythm and channel attention over a residual-CNN / Bi-LSTM stack,
//! with the tensor and autodiff core, data handling, training, metrics and
//! attention reports it needs.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod preprocess;
pub mod training;

pub use error::{Error, Result};

pub type Tensor64 = numcore::Tensor<f64>;
pub type Tensor32 = numcore::Tensor<f32>;
pub type Graph64 = numcore::Graph<f64>;
pub type Graph32 = numcore::Graph<f32>;
pub type ImleNet64 = model::ImleNet<f64>;
pub type ImleNet32 = model::ImleNet<f32>;
pub type ModelOutput64 = model::ModelOutput<f64>;
