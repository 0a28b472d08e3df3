//! Feature-vector helpers and the text embedding interface.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

pub fn norm(a: &[f32]) -> f64 {
    libm::sqrt(dot(a, a))
}

/// Cosine similarity, or `None` if either vector has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Unit-length copy, or `None` for a zero vector.
pub fn normalized(a: &[f32]) -> Option<Vec<f32>> {
    let n = norm(a);
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    Some(a.iter().map(|x| (*x as f64 / n) as f32).collect())
}

/// Componentwise arithmetic mean of equal-length vectors, in f64.
pub fn mean<'a>(vectors: impl IntoIterator<Item = &'a [f32]>, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0f64; dim];
    let mut n = 0usize;
    for v in vectors {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += *x as f64;
        }
        n += 1;
    }
    if n > 0 {
        for a in &mut acc {
            *a /= n as f64;
        }
    }
    acc
}

pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|x| *x as f32).collect()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbedError {
    #[error("text has no embeddable tokens: {0:?}")]
    EmptyText(String),
    #[error("embedder returned {got} vectors for {expected} texts")]
    CountMismatch { expected: usize, got: usize },
    #[error("embedding has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedder failure: {0}")]
    Failure(String),
}

/// Maps free text into the feature space of graph nodes.
pub trait TextEmbedder {
    fn dim(&self) -> usize;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, EmbedError>;

    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        let mut out = self.embed_batch(&[text])?;
        if out.len() != 1 {
            return Err(EmbedError::CountMismatch {
                expected: 1,
                got: out.len(),
            });
        }
        let v = out.pop().unwrap_or_default();
        if v.len() != self.dim() {
            return Err(EmbedError::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        Ok(v)
    }
}

/// Lowercased alphanumeric tokens.
pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic bag-of-tokens embedder.
///
/// Each token seeds a pseudo-random direction; a text embeds to the
/// normalized sum of its token directions. Equal token multisets give equal
/// vectors, and texts sharing tokens are positively correlated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        HashEmbedder { dim, seed: 0 }
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()) ^ self.seed);
        (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    pub fn embed_text(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        let mut acc = vec![0.0f64; self.dim];
        let mut any = false;
        for t in tokens(text) {
            any = true;
            for (a, x) in acc.iter_mut().zip(self.token_vector(&t)) {
                *a += x;
            }
        }
        let n = libm::sqrt(acc.iter().map(|x| x * x).sum::<f64>());
        if !any || n == 0.0 {
            return Err(EmbedError::EmptyText(String::from(text)));
        }
        Ok(acc.iter().map(|x| (x / n) as f32).collect())
    }
}

impl TextEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, EmbedError> {
        texts.iter().map(|t| self.embed_text(t)).collect()
    }
}
