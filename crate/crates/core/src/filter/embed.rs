//! Sentence embeddings for near-duplicate detection.

use std::collections::BTreeMap;

use super::FilterError;
use crate::text;

/// Sparse vector with features sorted by name.
pub type SparseVector = Vec<(String, f64)>;

pub trait EmbeddingProvider: Send + Sync {
    /// Unit-norm vectors, one per text.
    fn embed(&self, texts: &[String]) -> Result<Vec<SparseVector>, FilterError>;
}

/// L2-normalized counts of lowercased unigrams and, optionally, bigrams.
#[derive(Debug, Clone, Copy)]
pub struct NgramEmbedder {
    pub bigrams: bool,
}

impl Default for NgramEmbedder {
    fn default() -> Self {
        NgramEmbedder { bigrams: true }
    }
}

impl NgramEmbedder {
    pub fn embed_one(&self, text: &str) -> SparseVector {
        let words = text::lower_words(text);
        let mut counts: BTreeMap<String, f64> = BTreeMap::new();
        for w in &words {
            *counts.entry(format!("1:{w}")).or_default() += 1.0;
        }
        if self.bigrams {
            for pair in words.windows(2) {
                *counts.entry(format!("2:{} {}", pair[0], pair[1])).or_default() += 1.0;
            }
        }
        let norm = counts.values().map(|c| c * c).sum::<f64>().sqrt();
        counts.into_iter().map(|(k, c)| (k, c / norm)).collect()
    }
}

impl EmbeddingProvider for NgramEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<SparseVector>, FilterError> {
        if texts.is_empty() {
            return Err(FilterError::Precondition("nothing to embed".into()));
        }
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Dot product of two sorted sparse vectors.
pub fn dot(a: &SparseVector, b: &SparseVector) -> f64 {
    let (mut i, mut j, mut acc) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                acc += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

pub fn cosine(a: &SparseVector, b: &SparseVector) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}
