//! Raw-waveform differentiable architecture search for spoofing detection.
//!
//! The network is a sinc or convolutional frontend, searched cells, a GRU and a
//! cosine head. [`trainer::SearchRun`] searches cells, [`trainer::ScratchRun`]
//! trains the selected [`search::Genotype`], and [`metrics`] scores the result.

pub mod config;
pub mod data;
pub mod error;
pub mod frontend;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod search;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
