//! Numerical core shared by both detectors.
//!
//! The early detector averages cosine distances between an image embedding and
//! the embeddings of its transformed views. The late detector builds a cosine
//! similarity matrix over response embeddings, turns each row into a discrete
//! distribution and compares every ordered pair of rows with KL divergence.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied to similarity entries before row normalization.
pub const SIMILARITY_FLOOR: f64 = 1e-6;

/// Distributions must sum to one within this tolerance.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum MathError {
    #[error("embedding is empty")]
    EmptyVector,
    #[error("embedding contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("cannot take cosine of a zero-norm vector")]
    ZeroNorm,
    #[error("need at least {needed} vectors, got {got}")]
    TooFewVectors { needed: usize, got: usize },
    #[error("distribution entry {index} is not strictly positive ({value})")]
    NonPositive { index: usize, value: f64 },
    #[error("distribution sums to {0}, not 1")]
    NotNormalized(f64),
}

/// Finite, non-empty real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, MathError> {
        if values.is_empty() {
            return Err(MathError::EmptyVector);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(MathError::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, c: f64) -> Result<Self, MathError> {
        Self::new(self.0.iter().map(|v| v * c).collect())
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = MathError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

fn same_dim(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<(), MathError> {
    if a.dim() != b.dim() {
        return Err(MathError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(())
}

/// Dot product over the norm product, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, MathError> {
    same_dim(a, b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(MathError::ZeroNorm);
    }
    let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean of `1 - cos(original, view)` over all transformed views.
pub fn mean_transform_distance(
    original: &EmbeddingVector,
    views: &[EmbeddingVector],
) -> Result<f64, MathError> {
    if views.is_empty() {
        return Err(MathError::TooFewVectors { needed: 1, got: 0 });
    }
    let mut total = 0.0;
    for v in views {
        total += 1.0 - cosine_similarity(original, v)?;
    }
    Ok(total / views.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictLabel {
    Clean,
    Suspect,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub label: VerdictLabel,
    pub score: f64,
    pub threshold_used: f64,
}

impl Verdict {
    pub fn is_clean(&self) -> bool {
        self.label == VerdictLabel::Clean
    }
}

/// Clean iff `mean_distance <= tau_early`.
pub fn early_verdict(mean_distance: f64, tau_early: f64) -> Verdict {
    let label = if mean_distance <= tau_early {
        VerdictLabel::Clean
    } else {
        VerdictLabel::Suspect
    };
    Verdict {
        label,
        score: mean_distance,
        threshold_used: tau_early,
    }
}

/// Dense row-major square matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquareMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl SquareMatrix {
    fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut entries = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                entries.push(f(i, j));
            }
        }
        Self { n, entries }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.chunks(self.n)
    }
}

/// Pairwise cosine similarities of the response embeddings.
pub type SimilarityMatrix = SquareMatrix;

/// One discrete distribution per row; each row strictly positive and summing to 1.
pub type DistributionSet = SquareMatrix;

/// Ordered-pair KL divergences, `D[i][j] = KL(Q_i || Q_j)`.
pub type DivergenceMatrix = SquareMatrix;

pub fn similarity_matrix(vectors: &[EmbeddingVector]) -> Result<SimilarityMatrix, MathError> {
    if vectors.len() < 2 {
        return Err(MathError::TooFewVectors {
            needed: 2,
            got: vectors.len(),
        });
    }
    let n = vectors.len();
    let mut upper = vec![0.0; n * n];
    for i in 0..n {
        upper[i * n + i] = cosine_similarity(&vectors[i], &vectors[i])?;
        for j in i + 1..n {
            upper[i * n + j] = cosine_similarity(&vectors[i], &vectors[j])?;
        }
    }
    Ok(SquareMatrix::from_fn(n, |i, j| {
        if i <= j {
            upper[i * n + j]
        } else {
            upper[j * n + i]
        }
    }))
}

/// Clamps every entry to at least [`SIMILARITY_FLOOR`], then divides each row
/// by its L1 norm (diagonal included).
pub fn row_normalize(similarities: &SimilarityMatrix) -> DistributionSet {
    let n = similarities.size();
    let clamped: Vec<f64> = similarities
        .entries
        .iter()
        .map(|s| s.max(SIMILARITY_FLOOR))
        .collect();
    let sums: Vec<f64> = clamped.chunks(n).map(|r| r.iter().sum()).collect();
    SquareMatrix::from_fn(n, |i, j| clamped[i * n + j] / sums[i])
}

fn check_distribution(p: &[f64]) -> Result<(), MathError> {
    if let Some((index, &value)) = p.iter().enumerate().find(|(_, v)| v.is_nan() || **v <= 0.0) {
        return Err(MathError::NonPositive { index, value });
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(MathError::NotNormalized(sum));
    }
    Ok(())
}

/// `sum_x P(x) ln(P(x) / Q(x))`, in nats.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64, MathError> {
    if p.len() != q.len() {
        return Err(MathError::DimensionMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    check_distribution(p)?;
    check_distribution(q)?;
    Ok(p.iter().zip(q).map(|(pi, qi)| pi * (pi / qi).ln()).sum())
}

pub fn divergence_matrix(distributions: &DistributionSet) -> Result<DivergenceMatrix, MathError> {
    let n = distributions.size();
    let mut entries = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            entries.push(if i == j {
                0.0
            } else {
                kl_divergence(distributions.row(i), distributions.row(j))?
            });
        }
    }
    Ok(SquareMatrix { n, entries })
}

/// Largest off-diagonal entry (0 for a 1x1 matrix).
pub fn max_off_diagonal(matrix: &SquareMatrix) -> f64 {
    let n = matrix.size();
    (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| matrix.get(i, j))
        .fold(0.0, f64::max)
}

/// Suspect iff some off-diagonal divergence strictly exceeds `tau_late`.
pub fn late_verdict(divergences: &DivergenceMatrix, tau_late: f64) -> Verdict {
    let score = max_off_diagonal(divergences);
    let label = if score > tau_late {
        VerdictLabel::Suspect
    } else {
        VerdictLabel::Clean
    };
    Verdict {
        label,
        score,
        threshold_used: tau_late,
    }
}

/// Full late-stage chain from response embeddings to pairwise divergences.
pub fn response_divergence(vectors: &[EmbeddingVector]) -> Result<DivergenceMatrix, MathError> {
    divergence_matrix(&row_normalize(&similarity_matrix(vectors)?))
}
