//! Spatiotemporal graph sequence-to-sequence traffic forecasting.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod graph;
pub mod model;
pub mod pam;
pub mod params;
pub mod tensor;
pub mod training;

pub use autodiff::{ElementwiseOp, Gradients, Tape, Var};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use graph::{Edge, TrafficGraph};
pub use model::{DecoderMode, ModelConfig, SpatialMode, StSeq2Seq, Variant};
pub use tensor::Tensor;
