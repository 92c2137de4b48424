pub mod cli;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod objectives;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
