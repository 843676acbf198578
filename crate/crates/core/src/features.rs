//! Tokenization and hashed bag-of-token features.
//!
//! The tokenizer is the only normalization point in the crate: rule
//! vocabularies, mask predictions and feature vectors all derive from it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("feature space size must be positive")]
    EmptySpace,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// 64-bit FNV-1a; stable across platforms and toolchains, unlike `DefaultHasher`.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Bucket a token falls into for a feature space of `space_size` slots.
pub fn feature_id(token: &str, space_size: usize) -> u32 {
    (fnv1a(token.as_bytes()) % space_size as u64) as u32
}

/// Sparse non-negative vector with sorted, unique, non-zero entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    dim: usize,
    entries: Vec<(u32, f64)>,
}

impl SparseVector {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            entries: Vec::new(),
        }
    }

    /// Builds a vector from arbitrary (id, value) pairs: duplicate ids are
    /// summed, zeros dropped, ids outside `dim` rejected.
    pub fn from_pairs(dim: usize, pairs: impl IntoIterator<Item = (u32, f64)>) -> Option<Self> {
        let mut entries: Vec<(u32, f64)> = pairs.into_iter().collect();
        if entries.iter().any(|(id, _)| *id as usize >= dim) {
            return None;
        }
        entries.sort_by_key(|(id, _)| *id);
        let mut merged: Vec<(u32, f64)> = Vec::with_capacity(entries.len());
        for (id, v) in entries {
            match merged.last_mut() {
                Some((last, acc)) if *last == id => *acc += v,
                _ => merged.push((id, v)),
            }
        }
        merged.retain(|(_, v)| *v != 0.0);
        Some(Self {
            dim,
            entries: merged,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(i, v)| (*i, v * factor))
            .filter(|(_, v)| *v != 0.0)
            .collect();
        Self {
            dim: self.dim,
            entries,
        }
    }

    pub fn dot(&self, other: &SparseVector) -> Result<f64, FeatureError> {
        if self.dim != other.dim {
            return Err(FeatureError::DimensionMismatch(self.dim, other.dim));
        }
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        let (a, b) = (&self.entries, &other.entries);
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
        Ok(acc)
    }

    /// Dot product against a dense row, ignoring ids past its end.
    pub fn dot_dense(&self, dense: &[f64]) -> f64 {
        self.entries
            .iter()
            .filter_map(|(i, v)| dense.get(*i as usize).map(|w| w * v))
            .sum()
    }
}

/// Hashed token counts, L2-normalized. Empty input yields the zero vector.
pub fn featurize(tokens: &[String], space_size: usize) -> Result<SparseVector, FeatureError> {
    if space_size == 0 {
        return Err(FeatureError::EmptySpace);
    }
    let counts = tokens.iter().map(|t| (feature_id(t, space_size), 1.0));
    let raw = SparseVector::from_pairs(space_size, counts).expect("ids reduced modulo space size");
    let norm = raw.norm();
    if norm == 0.0 {
        return Ok(raw);
    }
    Ok(raw.scaled(1.0 / norm))
}
