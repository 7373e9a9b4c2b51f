//! Dense embedding vectors and the distance functions defined on them.
//!
//! All distances and norms accumulate in `f64` regardless of the storage
//! scalar, so an `f32` index and an `f64` oracle computing over the same
//! stored bits produce identical results.

use crate::Scalar;

/// Errors from vector construction and pairwise operations.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VectorError {
    #[error("vector must have at least one component")]
    Empty,
    #[error("component {index} is not finite")]
    NonFinite { index: usize },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("operation undefined for a zero vector")]
    ZeroVector,
}

/// Fixed-dimension dense vector with finite components.
///
/// Invariants (enforced at construction): non-empty, every component finite.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector<S: Scalar> {
    components: Vec<S>,
}

impl<S: Scalar> DenseVector<S> {
    /// Validates and wraps raw components.
    pub fn new(components: Vec<S>) -> Result<Self, VectorError> {
        if components.is_empty() {
            return Err(VectorError::Empty);
        }
        for (index, c) in components.iter().enumerate() {
            if !c.is_finite() {
                return Err(VectorError::NonFinite { index });
            }
        }
        Ok(Self { components })
    }

    /// Builds from `f64` values, rounding to the storage scalar.
    ///
    /// Values that overflow the storage scalar's range (e.g. 1e300 into
    /// `f32`) are rejected as non-finite rather than silently saturated.
    pub fn from_f64(values: &[f64]) -> Result<Self, VectorError> {
        Self::new(values.iter().map(|&v| S::from_f64_lossy(v)).collect())
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[S] {
        &self.components
    }

    /// Widens every component for full-precision arithmetic.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.to_f64_lossy()).collect()
    }

    /// Re-stores this vector under another scalar type.
    pub fn cast<T: Scalar>(&self) -> DenseVector<T> {
        DenseVector {
            components: self
                .components
                .iter()
                .map(|c| T::from_f64_lossy(c.to_f64_lossy()))
                .collect(),
        }
    }
}

impl<S: Scalar> From<DenseVector<S>> for Vec<S> {
    fn from(v: DenseVector<S>) -> Self {
        v.components
    }
}

fn check_dims<S: Scalar>(a: &DenseVector<S>, b: &DenseVector<S>) -> Result<(), VectorError> {
    if a.dim() != b.dim() {
        return Err(VectorError::DimensionMismatch { left: a.dim(), right: b.dim() });
    }
    Ok(())
}

/// Dot product, accumulated in `f64`.
pub fn dot<S: Scalar>(a: &DenseVector<S>, b: &DenseVector<S>) -> Result<f64, VectorError> {
    check_dims(a, b)?;
    let mut acc = 0.0f64;
    for (x, y) in a.components().iter().zip(b.components()) {
        acc += x.to_f64_lossy() * y.to_f64_lossy();
    }
    Ok(acc)
}

/// Euclidean norm, accumulated in `f64`.
pub fn norm<S: Scalar>(v: &DenseVector<S>) -> f64 {
    let mut acc = 0.0f64;
    for x in v.components() {
        let x = x.to_f64_lossy();
        acc += x * x;
    }
    acc.sqrt()
}

/// Cosine similarity in `[-1, 1]`. Errors on dimension mismatch or a zero
/// vector on either side.
pub fn cosine_similarity<S: Scalar>(
    a: &DenseVector<S>,
    b: &DenseVector<S>,
) -> Result<f64, VectorError> {
    let d = dot(a, b)?;
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(VectorError::ZeroVector);
    }
    // Guard against rounding pushing the ratio a hair outside [-1, 1].
    Ok((d / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine distance `1 - cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance<S: Scalar>(
    a: &DenseVector<S>,
    b: &DenseVector<S>,
) -> Result<f64, VectorError> {
    Ok(1.0 - cosine_similarity(a, b)?)
}

/// Scales to unit Euclidean norm. Errors on a zero vector.
///
/// The result's norm is exactly 1 up to storage rounding: within 1e-9 for
/// `f64` storage, within one `f32` ulp otherwise.
pub fn l2_normalize<S: Scalar>(v: &DenseVector<S>) -> Result<DenseVector<S>, VectorError> {
    let n = norm(v);
    if n == 0.0 {
        return Err(VectorError::ZeroVector);
    }
    let scaled: Vec<S> = v
        .components()
        .iter()
        .map(|c| S::from_f64_lossy(c.to_f64_lossy() / n))
        .collect();
    DenseVector::new(scaled)
}

/// Squared Euclidean distance, accumulated in `f64`.
pub fn euclidean_distance_sq<S: Scalar>(
    a: &DenseVector<S>,
    b: &DenseVector<S>,
) -> Result<f64, VectorError> {
    check_dims(a, b)?;
    let mut acc = 0.0f64;
    for (x, y) in a.components().iter().zip(b.components()) {
        let d = x.to_f64_lossy() - y.to_f64_lossy();
        acc += d * d;
    }
    Ok(acc)
}
