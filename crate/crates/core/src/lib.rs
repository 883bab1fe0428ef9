//! Energy-based density models trained against a deep generator.
//!
//! The energy model learns `E(x)` by pushing energy down on data and up on
//! generator samples; the generator learns to produce low-energy samples
//! while a batch-norm entropy surrogate keeps it from collapsing.

pub mod autodiff;
pub mod data_io;
pub mod energy_model;
pub mod error;
pub mod evaluation;
pub mod experts;
pub mod generator;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod param;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
