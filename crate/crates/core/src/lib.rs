//! Generative neural temporal point processes.

pub mod autodiff;
pub mod data;
pub mod decoder;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod hawkes;
pub mod mark;
pub mod metrics;
pub mod model;
pub mod training;

pub use error::{Error, Result};
