//! Multiple stochastic prompt tuning over frozen encoders.

pub mod autodiff;
pub mod datagen;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod rng;
pub mod stochastic;
pub mod trainer;

pub use error::{Error, Result};
