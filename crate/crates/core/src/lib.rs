//! Style-homogenized embedding alignment over precomputed image and text
//! embeddings.

pub mod dataset;
pub mod error;
pub mod harness;
pub mod homogenize;
pub mod inference;
pub mod synthgen;
pub mod trainer;
pub mod vector;
pub mod zeroshot;

pub use dataset::{EmbeddingDataset, LabeledEmbedding};
pub use error::{Result, ShedError};
pub use vector::Vector;
