//! Product quantizer: splits a vector into equal-width subspaces and codes
//! each with one byte against a 256-entry codebook.
//!
//! Codes are always one byte per subquantizer. Encoding picks the nearest
//! sub-centroid in `f64`; asymmetric distance computation (ADC) looks up
//! per-subspace squared distances from a query-specific table, so scanning a
//! coded list costs one table lookup and add per byte.

use crate::kmeans::train_kmeans;
use crate::vector::DenseVector;
use crate::{l2_sq, QuantError, Scalar, Vector64};
use log::warn;

/// Entries per sub-codebook. Codes are one byte, so this is fixed.
pub const CODEBOOK_SIZE: usize = 256;

/// Lloyd iterations used for each sub-codebook during training.
const PQ_KMEANS_ITERS: usize = 25;

/// Trained product quantizer over `num_subquantizers()` subspaces.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductQuantizer<S: Scalar> {
    sub_dim: usize,
    /// `codebooks[m]` holds exactly [`CODEBOOK_SIZE`] centroids of `sub_dim`.
    codebooks: Vec<Vec<DenseVector<S>>>,
}

impl<S: Scalar> ProductQuantizer<S> {
    /// Wraps pre-trained codebooks (used when loading persisted indexes).
    pub fn new(codebooks: Vec<Vec<DenseVector<S>>>) -> Result<Self, QuantError> {
        if codebooks.is_empty() {
            return Err(QuantError::EmptyTrainingSet);
        }
        let sub_dim = codebooks[0].first().ok_or(QuantError::EmptyTrainingSet)?.dim();
        for book in &codebooks {
            if book.len() != CODEBOOK_SIZE {
                return Err(QuantError::InvalidClusterCount { k: book.len(), n: CODEBOOK_SIZE });
            }
            for c in book {
                if c.dim() != sub_dim {
                    return Err(QuantError::DimensionMismatch { expected: sub_dim, got: c.dim() });
                }
            }
        }
        Ok(Self { sub_dim, codebooks })
    }

    pub fn num_subquantizers(&self) -> usize {
        self.codebooks.len()
    }

    pub fn sub_dim(&self) -> usize {
        self.sub_dim
    }

    /// Full input dimension this quantizer codes.
    pub fn dim(&self) -> usize {
        self.sub_dim * self.codebooks.len()
    }

    pub fn codebooks(&self) -> &[Vec<DenseVector<S>>] {
        &self.codebooks
    }

    /// Codes a vector as one byte per subspace (nearest sub-centroid in
    /// `f64`; distance ties break toward the lower centroid index).
    pub fn encode(&self, v: &[f64]) -> Result<Vec<u8>, QuantError> {
        if v.len() != self.dim() {
            return Err(QuantError::DimensionMismatch { expected: self.dim(), got: v.len() });
        }
        let mut code = Vec::with_capacity(self.codebooks.len());
        for (m, book) in self.codebooks.iter().enumerate() {
            let slice = &v[m * self.sub_dim..(m + 1) * self.sub_dim];
            let mut best = (f64::INFINITY, 0usize);
            for (j, centroid) in book.iter().enumerate() {
                let mut acc = 0.0;
                for (x, c) in slice.iter().zip(centroid.components()) {
                    let d = x - c.to_f64_lossy();
                    acc += d * d;
                }
                if acc < best.0 {
                    best = (acc, j);
                }
            }
            code.push(best.1 as u8);
        }
        Ok(code)
    }

    /// Reconstructs the coded vector by concatenating sub-centroids. Total
    /// over all byte values: every `[u8]` of the right length decodes.
    pub fn decode(&self, code: &[u8]) -> Result<DenseVector<S>, QuantError> {
        if code.len() != self.codebooks.len() {
            return Err(QuantError::CodeLengthMismatch {
                expected: self.codebooks.len(),
                got: code.len(),
            });
        }
        let mut out = Vec::with_capacity(self.dim());
        for (m, &byte) in code.iter().enumerate() {
            out.extend_from_slice(self.codebooks[m][byte as usize].components());
        }
        DenseVector::new(out).map_err(QuantError::from)
    }

    /// Builds the query-specific ADC lookup table:
    /// `table[m][j] = ||query_slice_m - codebook[m][j]||^2`.
    pub fn adc_table(&self, query: &[f64]) -> Result<AdcTable, QuantError> {
        if query.len() != self.dim() {
            return Err(QuantError::DimensionMismatch { expected: self.dim(), got: query.len() });
        }
        let m_count = self.codebooks.len();
        let mut table = vec![0.0f64; m_count * CODEBOOK_SIZE];
        for (m, book) in self.codebooks.iter().enumerate() {
            let slice = &query[m * self.sub_dim..(m + 1) * self.sub_dim];
            let row = &mut table[m * CODEBOOK_SIZE..(m + 1) * CODEBOOK_SIZE];
            for (j, centroid) in book.iter().enumerate() {
                let mut acc = 0.0;
                for (x, c) in slice.iter().zip(centroid.components()) {
                    let d = x - c.to_f64_lossy();
                    acc += d * d;
                }
                row[j] = acc;
            }
        }
        Ok(AdcTable { table, num_subquantizers: m_count })
    }

    /// Squared reconstruction error of `v` under this quantizer.
    pub fn reconstruction_error(&self, v: &[f64]) -> Result<f64, QuantError> {
        let code = self.encode(v)?;
        let recon = self.decode(&code)?.to_f64_vec();
        Ok(l2_sq(v, &recon))
    }
}

/// Per-query ADC lookup table produced by [`ProductQuantizer::adc_table`].
#[derive(Debug, Clone)]
pub struct AdcTable {
    /// Row-major `[num_subquantizers][CODEBOOK_SIZE]` squared distances.
    table: Vec<f64>,
    num_subquantizers: usize,
}

impl AdcTable {
    pub fn num_subquantizers(&self) -> usize {
        self.num_subquantizers
    }

    /// Approximate squared distance between the table's query and the coded
    /// vector: the sum of one table entry per code byte.
    #[inline]
    pub fn distance(&self, code: &[u8]) -> f64 {
        debug_assert_eq!(code.len(), self.num_subquantizers);
        let mut acc = 0.0;
        for (m, &byte) in code.iter().enumerate() {
            acc += self.table[m * CODEBOOK_SIZE + byte as usize];
        }
        acc
    }
}

/// Trains a product quantizer with `pq_bytes` subquantizers over `vectors`.
///
/// Each subspace gets an independent k-means run (k = 256, or the number of
/// training vectors if smaller, with the codebook padded back to 256 by
/// cycling; padded duplicates never win encoding ties, which break toward
/// the lower index). Deterministic for a given `(vectors, pq_bytes, seed)`.
pub fn train_pq<S: Scalar>(
    vectors: &[DenseVector<S>],
    pq_bytes: usize,
    seed: u64,
) -> Result<ProductQuantizer<S>, QuantError> {
    if vectors.is_empty() {
        return Err(QuantError::EmptyTrainingSet);
    }
    let dim = vectors[0].dim();
    if pq_bytes == 0 || dim % pq_bytes != 0 {
        return Err(QuantError::IndivisibleDimension { dim, parts: pq_bytes });
    }
    for v in vectors {
        if v.dim() != dim {
            return Err(QuantError::DimensionMismatch { expected: dim, got: v.dim() });
        }
    }
    let n = vectors.len();
    if n < CODEBOOK_SIZE {
        warn!(
            "training product quantizer on {n} vectors; codebooks will hold only {n} distinct entries"
        );
    }
    let sub_dim = dim / pq_bytes;

    let mut codebooks = Vec::with_capacity(pq_bytes);
    for m in 0..pq_bytes {
        let slices: Vec<Vector64> = vectors
            .iter()
            .map(|v| {
                let full = v.components();
                let s = &full[m * sub_dim..(m + 1) * sub_dim];
                Vector64::new(s.iter().map(|x| x.to_f64_lossy()).collect())
                    .expect("subspace slice of a valid vector is valid")
            })
            .collect();
        let k = CODEBOOK_SIZE.min(n);
        let sub_seed = seed.wrapping_add((m as u64 + 1).wrapping_mul(0x9E3779B97F4A7C15));
        let q = train_kmeans(&slices, k, sub_seed, PQ_KMEANS_ITERS)?;
        let mut book: Vec<DenseVector<S>> =
            q.centroids().iter().map(|c| c.cast::<S>()).collect();
        let trained = book.len();
        while book.len() < CODEBOOK_SIZE {
            let fill = book[book.len() % trained].clone();
            book.push(fill);
        }
        codebooks.push(book);
    }
    Ok(ProductQuantizer { sub_dim, codebooks })
}
