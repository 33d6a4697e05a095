//! Edge Transformer with masked-autoencoder pre-training for edge
//! classification on attributed bipartite graphs, plus link-prediction
//! baselines, a planted synthetic data generator and ranking evaluation.

pub mod autodiff;
pub mod baselines;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
