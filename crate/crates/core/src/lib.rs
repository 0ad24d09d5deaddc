pub mod dataset;
pub mod error;
pub mod eval;
pub mod loss;
pub mod nn;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
