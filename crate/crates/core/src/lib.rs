//! Adaptive listwise reranking harness for retrieval-augmented question answering.
//!
//! Numeric routines that work on embeddings or score matrices (k-means,
//! representative sampling, the best-k oracle) are generic over
//! [`num_traits::Float`]; the aliases below fix the scalar for the common cases.
//! Metric scores are always `f64`.

pub mod backends;
pub mod dataset;
pub mod distill;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod protocol;
pub mod seeding;
pub mod synthbench;
pub mod text;
pub mod types;

/// Scalar used for embedding vectors as they come off the wire.
pub type Embedding = f32;
/// Scalar used for scores and for clustering by default.
pub type Score = f64;

pub type KMeansResult32 = distill::KMeansResult<f32>;
pub type KMeansResult64 = distill::KMeansResult<f64>;
