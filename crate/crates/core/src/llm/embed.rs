use serde::{Deserialize, Serialize};

use super::ClientError;
use crate::hash::fnv1a64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Passage,
}

/// A text encoder. Implementations return raw vectors; [`embed`] applies
/// role prefixes and normalization.
pub trait Embedder: Send + Sync {
    /// Identifies the embedding space. Indexes record it and refuse queries
    /// from a different space.
    fn id(&self) -> String;

    /// Text prepended to inputs of the given role.
    fn prefix(&self, _role: Role) -> &str {
        ""
    }

    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ClientError>;
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EmbedError {
    #[error("cannot embed an empty batch")]
    EmptyBatch,
    #[error("embedder returned {got} vectors for {expected} inputs")]
    Count { expected: usize, got: usize },
    #[error("vector {index} has dimension {got}, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, got: usize },
    #[error(transparent)]
    Client(#[from] ClientError),
}

/// L2-normalizes in f64. A zero (or non-finite) vector maps to the canonical
/// unit vector e₀.
pub fn l2_normalize(v: &[f32]) -> Vec<f32> {
    let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        let mut e = vec![0.0; v.len().max(1)];
        e[0] = 1.0;
        return e;
    }
    v.iter().map(|&x| (f64::from(x) / norm) as f32).collect()
}

/// Embeds a batch with role prefixes applied, checks that every vector has
/// the same dimension and returns unit-norm vectors.
pub fn embed(embedder: &dyn Embedder, texts: &[&str], role: Role) -> Result<Vec<Vec<f32>>, EmbedError> {
    if texts.is_empty() {
        return Err(EmbedError::EmptyBatch);
    }
    let prefix = embedder.prefix(role);
    let inputs: Vec<String> = texts.iter().map(|t| format!("{prefix}{t}")).collect();
    let raw = embedder.embed_raw(&inputs)?;
    if raw.len() != texts.len() {
        return Err(EmbedError::Count {
            expected: texts.len(),
            got: raw.len(),
        });
    }
    let dim = raw[0].len();
    if let Some((index, v)) = raw.iter().enumerate().find(|(_, v)| v.len() != dim) {
        return Err(EmbedError::DimensionMismatch {
            index,
            expected: dim,
            got: v.len(),
        });
    }
    Ok(raw.iter().map(|v| l2_normalize(v)).collect())
}

/// Hashed bag of character trigrams.
///
/// Each window of three consecutive Unicode scalar values is hashed with
/// 64-bit FNV-1a over its UTF-8 bytes; bucket `hash % dim` is incremented.
/// The count vector is then L2-normalized. Texts with fewer than three
/// characters have no trigrams and map to e₀.
pub fn hash_embed(text: &str, dim: usize) -> Vec<f32> {
    assert!(dim >= 1);
    let chars: Vec<char> = text.chars().collect();
    let mut counts = vec![0f32; dim];
    let mut buf = String::with_capacity(12);
    for w in chars.windows(3) {
        buf.clear();
        buf.extend(w);
        counts[(fnv1a64(buf.as_bytes()) % dim as u64) as usize] += 1.0;
    }
    l2_normalize(&counts)
}

/// Offline embedder built on [`hash_embed`]. No role prefixes by default, so
/// a query identical to a passage embeds identically.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub dim: usize,
    pub query_prefix: String,
    pub passage_prefix: String,
}

impl HashEmbedder {
    pub const DEFAULT_DIM: usize = 256;

    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            query_prefix: String::new(),
            passage_prefix: String::new(),
        }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIM)
    }
}

impl Embedder for HashEmbedder {
    fn id(&self) -> String {
        format!("hash-trigram-{}", self.dim)
    }

    fn prefix(&self, role: Role) -> &str {
        match role {
            Role::Query => &self.query_prefix,
            Role::Passage => &self.passage_prefix,
        }
    }

    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ClientError> {
        Ok(texts.iter().map(|t| hash_embed(t, self.dim)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(v: &[f32]) -> f64 {
        v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt()
    }

    fn cosine(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
    }

    #[test]
    fn empty_text_is_canonical_unit_vector() {
        let v = hash_embed("", 16);
        assert_eq!(v[0], 1.0);
        assert!(v[1..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn abc_matches_hand_construction() {
        // One trigram "abc": the vector is the indicator of its bucket.
        let dim = 256;
        let bucket = (fnv1a64(b"abc") % dim as u64) as usize;
        let v = hash_embed("abc", dim);
        for (i, &x) in v.iter().enumerate() {
            assert_eq!(x, if i == bucket { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn trigram_overlap_cosine() {
        // {aaa, aab} vs {aaa, aac}: count vectors (1,1,0)·(1,0,1) / (√2·√2) = 1/2,
        // provided the three trigrams land in distinct buckets.
        let dim = 256;
        let buckets: std::collections::BTreeSet<u64> = [b"aaa", b"aab", b"aac"]
            .iter()
            .map(|t| fnv1a64(*t) % dim as u64)
            .collect();
        assert_eq!(buckets.len(), 3);
        let c = cosine(&hash_embed("aaab", dim), &hash_embed("aaac", dim));
        assert!((c - 0.5).abs() < 1e-6, "{c}");
    }

    #[test]
    fn identical_text_identical_vector() {
        let e = HashEmbedder::default();
        let v = embed(&e, &["the cat sat", "the cat sat"], Role::Query).unwrap();
        assert_eq!(v[0], v[1]);
        assert!((cosine(&v[0], &v[1]) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn embed_normalizes_and_checks() {
        struct Raw;
        impl Embedder for Raw {
            fn id(&self) -> String {
                "raw".into()
            }
            fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ClientError> {
                Ok(texts
                    .iter()
                    .map(|t| if t == "short" { vec![1.0] } else { vec![3.0, 4.0] })
                    .collect())
            }
        }
        let v = embed(&Raw, &["x"], Role::Passage).unwrap();
        assert_eq!(v[0], vec![0.6, 0.8]);
        assert!((norm(&v[0]) - 1.0).abs() < 1e-6);
        assert!(matches!(
            embed(&Raw, &["x", "short"], Role::Passage),
            Err(EmbedError::DimensionMismatch { index: 1, .. })
        ));
        assert_eq!(embed(&Raw, &[], Role::Query), Err(EmbedError::EmptyBatch));
    }

    #[test]
    fn prefixes_apply_by_role() {
        let mut e = HashEmbedder::new(64);
        e.query_prefix = "query: ".into();
        e.passage_prefix = "passage: ".into();
        let q = embed(&e, &["same text"], Role::Query).unwrap();
        let p = embed(&e, &["same text"], Role::Passage).unwrap();
        assert_ne!(q, p);
        assert_eq!(q[0], hash_embed("query: same text", 64));
    }
}
