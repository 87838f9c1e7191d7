pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod engine;
pub mod eval;
pub mod error;
pub mod exec;
pub mod graph;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{RampError, Result};
