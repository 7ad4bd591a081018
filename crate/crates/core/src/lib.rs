//! Time-frequency speech enhancement: a convolutional encoder with deep
//! connection blocks and two-dimensions attention, an enhancement layer of
//! dual-path conformers, and a decoder that predicts complex speech and noise
//! masks.
//!
//! Everything runs in `f64` on a small reverse-mode tape ([`graph::Graph`]).

pub mod attention2d;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod conformer;
pub mod data;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod signal;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use params::ParamStore;
pub use signal::{StftConfig, Waveform};
pub use tensor::Tensor;
