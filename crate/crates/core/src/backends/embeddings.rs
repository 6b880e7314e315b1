//! Embedding ingestion from JSONL and a local hashing embedder.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackendError, EmbeddingBackend};
use crate::text::tokens;

/// One line of an embedding file: `{"id": str, "vector": [f32, ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vector: Vec<f32>,
}

pub(crate) fn check_dimensions(vectors: &[Vec<f32>]) -> Result<(), BackendError> {
    let Some(first) = vectors.first() else {
        return Ok(());
    };
    let expected = first.len();
    if expected == 0 {
        return Err(BackendError::DimensionMismatch {
            expected: 1,
            got: 0,
            index: 0,
        });
    }
    match vectors.iter().position(|v| v.len() != expected) {
        Some(index) => Err(BackendError::DimensionMismatch {
            expected,
            got: vectors[index].len(),
            index,
        }),
        None => Ok(()),
    }
}

pub fn load_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>, BackendError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
    let records = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<EmbeddingRecord>(l)
                .map_err(|e| BackendError::Decode(format!("line {}: {e}", i + 1)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let vectors: Vec<Vec<f32>> = records.iter().map(|r| r.vector.clone()).collect();
    check_dimensions(&vectors)?;
    Ok(records)
}

/// Deterministic signed feature-hashing embedder over normalized tokens,
/// L2-normalized. Stands in for a remote embedding model in offline runs.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    pub dim: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self { dim: 64 }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0100_0000_01b3)
    })
}

impl HashingEmbedder {
    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f32; self.dim];
        for tok in tokens(text) {
            let h = fnv1a(tok.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl EmbeddingBackend for HashingEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        if texts.is_empty() {
            return Err(BackendError::InvalidRequest("empty embedding batch".into()));
        }
        if self.dim == 0 {
            return Err(BackendError::Config("embedding dimension must be positive".into()));
        }
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }

    fn describe(&self) -> String {
        format!("hashing-embedder:d={}", self.dim)
    }
}
