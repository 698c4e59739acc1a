//! Unit-norm embeddings and the similarity primitives used for ranking.

use serde::{Deserialize, Serialize};

use crate::error::{GalaError, Result};

/// A unit-norm feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    /// Wraps values that are already unit norm (within 1e-5).
    pub fn from_unit(values: Vec<f32>) -> Result<Self> {
        let n = norm(&values);
        if values.is_empty() || (n - 1.0).abs() > 1e-5 {
            return Err(GalaError::invalid(format!(
                "embedding norm {n} is not 1"
            )));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f32> {
        self.0
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt()
}

pub fn l2_normalize(v: &[f32]) -> Result<Embedding> {
    let n = norm(v);
    if v.is_empty() || n == 0.0 || !n.is_finite() {
        return Err(GalaError::DegenerateEmbedding);
    }
    Ok(Embedding(v.iter().map(|x| (*x as f64 / n) as f32).collect()))
}

/// Dot product of raw slices, accumulated in f64.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f32> {
    if a.dim() != b.dim() {
        return Err(GalaError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(dot(&a.0, &b.0).clamp(-1.0, 1.0) as f32)
}

/// Squared euclidean distance between unit vectors, `2 - 2s`.
pub fn sensitivity_distance(a: &Embedding, b: &Embedding) -> Result<f32> {
    if a.dim() != b.dim() {
        return Err(GalaError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok((2.0 - 2.0 * dot(&a.0, &b.0)).clamp(0.0, 4.0) as f32)
}
