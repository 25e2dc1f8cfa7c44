pub mod error;
pub mod eval;
pub mod image;
pub mod model;
pub mod morphology;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
