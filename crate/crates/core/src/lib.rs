//! From-scratch neural toolkit for legal-text span tagging and
//! premise/hypothesis classification.
//!
//! The numeric core (tensors, the autodiff graph, the models, the
//! optimizer) is generic over a floating-point scalar via [`scalar::Scalar`];
//! the aliases at the crate root pin everything shipped — training, metrics,
//! checkpoints, the CLI — to `f64`.

pub mod checkpoint;
pub mod cnn;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod ner;
pub mod nli;
pub mod optim;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};

/// Dense f64 tensor (the shipped concrete type).
pub type Tensor = tensor::Tensor<f64>;
/// f64 autodiff graph.
pub type Graph = graph::Graph<f64>;
pub type EncoderParams = encoder::EncoderParams<f64>;
pub type CnnParams = cnn::CnnParams<f64>;
pub type NerParams = ner::NerParams<f64>;
pub type NliParams = nli::NliParams<f64>;
pub type AdamState = optim::AdamState<f64>;
