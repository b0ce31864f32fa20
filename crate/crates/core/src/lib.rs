pub mod audio;
pub mod augment;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod hpo;
pub mod metrics;
pub mod models;
pub mod sampling;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
