//! Brain-language fusion: region-wise brain tokenizers whose outputs are
//! prepended to the prompt of a small autoregressive language decoder.

pub mod dataset;
pub mod decoder;
pub mod error;
pub mod linalg;
pub mod par;
pub mod rng;
pub mod tokenizer;

pub use error::{Error, Result};
pub mod model;
pub mod trainer;
pub mod generate;
pub mod eval;
pub mod checkpoint;
pub mod experiments;
