//! Semi-parametric knowledge graph completion.
//!
//! A small masked-entity encoder predicts the missing entity of a query
//! triple; an explicit knowledge store of anchor embeddings built from
//! entity descriptions and training triples supplies a k-nearest-neighbor
//! distribution that is linearly interpolated with the encoder's own.

pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod pipeline;
pub mod store;
pub mod text;
pub mod toy;

pub use error::{Error, Result};
