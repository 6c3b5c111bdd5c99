//! Real-centered dual-branch (spatial + spectral) forgery detector.

pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod rng;
pub mod spectral;
pub mod tensor;
pub mod train_eval;

pub use error::{Error, Result};
