pub mod codebook;
pub mod config;
pub mod corpus;
pub mod diffcore;
pub mod error;
pub mod matcher;
pub mod model;
pub mod pipeline;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
