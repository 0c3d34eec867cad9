//! Text-video retrieval over pre-extracted embeddings with fine-grained
//! relationship learning and an energy-based alignment regularizer.

pub mod adapters;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod eam;
pub mod error;
pub mod frl;
pub mod fusion;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod retrieval;
pub mod rng;
pub mod stochastic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
