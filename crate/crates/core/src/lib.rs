//! Instruction-adaptive transformation of pre-computed text embeddings.
//!
//! The crate builds an instruction-specific label taxonomy with LLM help
//! ([`taxonomy`]), trains a linear encoder/decoder that maps generic embeddings
//! into an instruction-aligned space ([`transform`]), and scores embeddings
//! on clustering, pair-similarity and triplet tasks ([`eval`]). [`pipeline`]
//! wires the stages together behind a config file.

pub mod corpus;
pub mod embed;
pub mod eval;
mod http;
mod linalg;
pub mod llm;
pub mod pipeline;
pub mod taxonomy;
pub mod transform;
pub mod vectorlab;

pub use corpus::TextRecord;
pub use vectorlab::{DenseMatrix, EmbeddingVector};
