//! Active-learning record deduplication.
//!
//! The pipeline runs candidate pairs through blocking, serialization,
//! knowledge injection and TF-IDF summarization, classifies them with a
//! compact transformer trained with R-Drop, and repeatedly asks a labeler
//! (a human queue or ground truth) for the pairs the model is least sure of.

pub mod active;
pub mod blocking;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod pipeline;
pub mod preprocess;
pub mod text;
pub mod training;

pub use error::{Error, Result};
