//! Retrieval-augmented named entity recognition and relation extraction.

pub mod binio;
pub mod config;
pub mod context;
pub mod corpus;
pub mod crf;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod moe;
pub mod optim;
pub mod pipeline;
pub mod re_model;
pub mod retrieval;
pub mod synth;
pub mod tensor;
pub mod text_index;
pub mod trainer;
pub mod vector_index;

pub use error::{Error, Result};
