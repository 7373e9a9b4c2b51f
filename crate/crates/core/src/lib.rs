//! Vector math and quantization primitives for embedding-based retrieval.
//!
//! Everything here is generic over the stored scalar type (`f32` for
//! production indexes, `f64` for reference computations and tests) via the
//! [`Scalar`] trait. Regardless of the storage type, all arithmetic is
//! accumulated in `f64`: quantizer training, distance computation, and
//! normalization run at full precision and round to the storage scalar only
//! when results are materialized.

pub mod config;
pub mod hash;
pub mod kmeans;
pub mod opq;
pub mod pca;
pub mod pq;
pub mod transform;
pub mod vector;

pub use config::{AnnConfig, CoarseMetric, TransformSpec};
pub use hash::fnv1a64;
pub use kmeans::{train_kmeans, train_kmeans_traced, CoarseQuantizer};
pub use opq::train_opq;
pub use pca::train_pca;
pub use pq::{train_pq, AdcTable, ProductQuantizer, CODEBOOK_SIZE};
pub use transform::Transform;
pub use vector::{
    cosine_distance, cosine_similarity, dot, euclidean_distance_sq, l2_normalize, norm,
    DenseVector, VectorError,
};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::AddAssign;

/// Floating-point storage scalar for vectors, centroids, and codebooks.
///
/// Implementors must convert losslessly enough for retrieval math: every
/// operation in this crate widens values to `f64` before accumulating, so the
/// scalar only determines storage precision, never arithmetic precision.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Widen to `f64` for arithmetic.
    fn to_f64_lossy(self) -> f64;
    /// Round an `f64` intermediate down to storage precision.
    fn from_f64_lossy(value: f64) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64_lossy(value: f64) -> Self {
        value as f32
    }
}

impl Scalar for f64 {
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64_lossy(value: f64) -> Self {
        value
    }
}

/// Production storage vector: 32-bit components, 64-bit arithmetic.
pub type Vector32 = DenseVector<f32>;
/// Full-precision vector for reference computations and oracles.
pub type Vector64 = DenseVector<f64>;

/// Shared error type for quantizer training and application.
#[derive(Debug, thiserror::Error)]
pub enum QuantError {
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("invalid cluster count {k} for {n} training vectors")]
    InvalidClusterCount { k: usize, n: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dimension {dim} is not divisible by {parts} subquantizers")]
    IndivisibleDimension { dim: usize, parts: usize },
    #[error("code length {got} does not match {expected} subquantizers")]
    CodeLengthMismatch { expected: usize, got: usize },
    #[error("requested output dimension {out_dim} exceeds input dimension {dim}")]
    OutputDimTooLarge { out_dim: usize, dim: usize },
    #[error("insufficient samples: {n} vectors for output dimension {out_dim}")]
    InsufficientSamples { n: usize, out_dim: usize },
    #[error(transparent)]
    Vector(#[from] VectorError),
}

/// Row-major `f64` matrix used internally by quantizer training.
///
/// Deliberately minimal: just enough structure to keep hot loops over
/// contiguous rows without pulling a linear algebra crate into every
/// signature. Conversions to `nalgebra` happen only where factorizations are
/// needed (PCA, OPQ).
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct MatrixF64 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixF64 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn from_vectors<S: Scalar>(vectors: &[DenseVector<S>]) -> Self {
        let rows = vectors.len();
        let cols = if rows == 0 { 0 } else { vectors[0].dim() };
        let mut data = Vec::with_capacity(rows * cols);
        for v in vectors {
            data.extend(v.components().iter().map(|x| x.to_f64_lossy()));
        }
        Self { rows, cols, data }
    }
}

/// Squared Euclidean distance between two equal-length `f64` slices.
#[inline]
pub(crate) fn l2_sq(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}
