//! Optimized product quantization: learns an orthonormal rotation jointly
//! with the product codebooks so subspaces decorrelate and share distortion.
//!
//! Alternating minimization of `sum_i ||R x_i - decode(encode(R x_i))||^2`:
//! with the rotation fixed, one Lloyd step refines the codebooks; with the
//! codes fixed, the optimal rotation is the orthogonal Procrustes solution
//! `R = V U^T` from the SVD `U S V^T` of the cross-covariance between inputs
//! and their reconstructions. Both half-steps are exact minimizers, so the
//! quantization error is non-increasing across outer iterations.
//!
//! Alternation alone cannot escape the identity basin: when the data is
//! axis-aligned but the variance is unbalanced across subspaces, the
//! Procrustes step of near-diagonal reconstructions is itself near-identity.
//! The rotation is therefore initialized by variance allocation: a
//! permutation that deals coordinates to subspaces so the per-subspace
//! variance products balance. A permutation never distorts the coordinate
//! marginals (a full eigenvector basis can, badly, when the spectrum is
//! near-degenerate), so the starting error is never worse than plain PQ's,
//! and alternation refines from there.

use crate::pq::{train_pq, ProductQuantizer, CODEBOOK_SIZE};
use crate::transform::Transform;
use crate::vector::DenseVector;
use crate::{l2_sq, MatrixF64, QuantError, Scalar};
use nalgebra::DMatrix;

/// Trains an OPQ rotation plus product quantizer.
///
/// `outer_iters == 0` performs no rotation learning: the result is the
/// identity rotation and exactly the codebooks of
/// [`train_pq`]`(vectors, pq_bytes, seed)`. Deterministic for fixed inputs.
pub fn train_opq<S: Scalar>(
    vectors: &[DenseVector<S>],
    pq_bytes: usize,
    seed: u64,
    outer_iters: usize,
) -> Result<(Transform<S>, ProductQuantizer<S>), QuantError> {
    Ok(train_opq_traced(vectors, pq_bytes, seed, outer_iters)?.0)
}

/// [`train_opq`] variant that also returns the total quantization error
/// measured at the start of each outer iteration. Non-increasing; tests
/// assert on it.
pub fn train_opq_traced<S: Scalar>(
    vectors: &[DenseVector<S>],
    pq_bytes: usize,
    seed: u64,
    outer_iters: usize,
) -> Result<((Transform<S>, ProductQuantizer<S>), Vec<f64>), QuantError> {
    // Training is kept in f64 end to end and rounded to the storage scalar
    // only on return. train_pq performs all input validation.
    let vectors64: Vec<DenseVector<f64>> = vectors.iter().map(|v| v.cast::<f64>()).collect();
    if outer_iters == 0 {
        let pq = train_pq::<f64>(&vectors64, pq_bytes, seed)?;
        let dim = pq.dim();
        let rotation = (0..dim)
            .map(|a| {
                let mut row = vec![0.0f64; dim];
                row[a] = 1.0;
                DenseVector::from_f64(&row)
            })
            .collect::<Result<Vec<_>, _>>()?;
        return Ok(((Transform::Opq { rotation }, cast_pq::<S>(&pq)?), Vec::new()));
    }

    let data = MatrixF64::from_vectors(vectors);
    let n = data.rows;
    let dim = data.cols;
    if dim == 0 || n == 0 {
        return Err(QuantError::EmptyTrainingSet);
    }
    if pq_bytes == 0 || dim % pq_bytes != 0 {
        return Err(QuantError::IndivisibleDimension { dim, parts: pq_bytes });
    }
    let sub_dim = dim / pq_bytes;

    let mut rot = variance_allocation_permutation(&data, sub_dim, pq_bytes);

    // Initial codebooks: a full PQ training pass over the rotated data.
    let mut rotated_vec = vec![0.0f64; dim];
    let rotated: Vec<DenseVector<f64>> = (0..n)
        .map(|i| {
            apply_rotation(&rot, data.row(i), &mut rotated_vec);
            DenseVector::from_f64(&rotated_vec)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let pq0 = train_pq::<f64>(&rotated, pq_bytes, seed)?;
    let mut books: Vec<Vec<Vec<f64>>> = pq0
        .codebooks()
        .iter()
        .map(|book| book.iter().map(|c| c.to_f64_vec()).collect())
        .collect();

    let mut trace = Vec::new();
    let mut rotated = vec![0.0f64; dim];
    for _ in 0..outer_iters {
        // Encode the rotated data under the current codebooks and measure
        // the current total error.
        let mut err = 0.0f64;
        let mut cross = DMatrix::<f64>::zeros(dim, dim);
        let mut codes: Vec<Vec<u8>> = Vec::with_capacity(n);
        for i in 0..n {
            apply_rotation(&rot, data.row(i), &mut rotated);
            let code = encode_raw(&books, sub_dim, &rotated);
            let recon = decode_raw(&books, sub_dim, &code);
            err += l2_sq(&rotated, &recon);
            // cross[a][b] += x[a] * recon[b]; the Procrustes target couples
            // the unrotated input with the reconstruction.
            let x = data.row(i);
            for a in 0..dim {
                let xa = x[a];
                for b in 0..dim {
                    cross[(a, b)] += xa * recon[b];
                }
            }
            codes.push(code);
        }
        if let Some(&prev) = trace.last() {
            debug_assert!(
                err <= prev * (1.0 + 1e-9) + 1e-12,
                "quantization error rose: {prev} -> {err}"
            );
        }
        trace.push(err);

        // Procrustes: with codes fixed, R = V U^T minimizes the error.
        let svd = cross.svd(true, true);
        let u = svd.u.expect("SVD with u requested");
        let v_t = svd.v_t.expect("SVD with v_t requested");
        let r_new = v_t.transpose() * u.transpose();
        for a in 0..dim {
            for b in 0..dim {
                rot[a * dim + b] = r_new[(a, b)];
            }
        }
        debug_assert!(rotation_defect(&rot, dim) < 1e-6);

        // One Lloyd step under the new rotation: reassign, then move each
        // centroid to the mean of its members (untouched when empty).
        let mut sums = vec![vec![0.0f64; CODEBOOK_SIZE * sub_dim]; pq_bytes];
        let mut counts = vec![vec![0usize; CODEBOOK_SIZE]; pq_bytes];
        for i in 0..n {
            apply_rotation(&rot, data.row(i), &mut rotated);
            let code = encode_raw(&books, sub_dim, &rotated);
            for (m, &byte) in code.iter().enumerate() {
                let j = byte as usize;
                counts[m][j] += 1;
                let dst = &mut sums[m][j * sub_dim..(j + 1) * sub_dim];
                for (d, x) in dst.iter_mut().zip(&rotated[m * sub_dim..(m + 1) * sub_dim]) {
                    *d += x;
                }
            }
        }
        for m in 0..pq_bytes {
            for j in 0..CODEBOOK_SIZE {
                if counts[m][j] == 0 {
                    continue;
                }
                let inv = 1.0 / counts[m][j] as f64;
                for (dst, s) in books[m][j]
                    .iter_mut()
                    .zip(&sums[m][j * sub_dim..(j + 1) * sub_dim])
                {
                    *dst = s * inv;
                }
            }
        }
    }

    let rotation_rows = (0..dim)
        .map(|a| DenseVector::from_f64(&rot[a * dim..(a + 1) * dim]))
        .collect::<Result<Vec<_>, _>>()?;
    let transform = Transform::Opq { rotation: rotation_rows };
    let final_books = books
        .into_iter()
        .map(|book| {
            book.into_iter()
                .map(|c| DenseVector::<S>::from_f64(&c))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let pq = ProductQuantizer::new(final_books)?;
    Ok(((transform, pq), trace))
}

fn cast_pq<S: Scalar>(pq: &ProductQuantizer<f64>) -> Result<ProductQuantizer<S>, QuantError> {
    ProductQuantizer::new(
        pq.codebooks()
            .iter()
            .map(|book| book.iter().map(|c| c.cast::<S>()).collect())
            .collect(),
    )
}

/// Parametric initialization: a permutation matrix that deals coordinates to
/// subspaces so the per-subspace log-variance sums stay balanced (greedily,
/// largest variance first; ties order by coordinate index, bucket ties by
/// bucket index). Deterministic, exactly orthonormal.
fn variance_allocation_permutation(data: &MatrixF64, sub_dim: usize, parts: usize) -> Vec<f64> {
    let dim = data.cols;
    let n = data.rows;
    let mut moment = vec![0.0f64; dim];
    for i in 0..n {
        for (m, x) in moment.iter_mut().zip(data.row(i)) {
            *m += x * x;
        }
    }
    for m in &mut moment {
        *m /= n as f64;
    }
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| moment[b].total_cmp(&moment[a]).then(a.cmp(&b)));

    let mut bucket_log = vec![0.0f64; parts];
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); parts];
    for &coord in &order {
        let mut best: Option<usize> = None;
        for b in 0..parts {
            if buckets[b].len() < sub_dim
                && best.is_none_or(|chosen| bucket_log[b] < bucket_log[chosen])
            {
                best = Some(b);
            }
        }
        let b = best.expect("dim == parts * sub_dim leaves an open bucket");
        bucket_log[b] += moment[coord].max(1e-12).ln();
        buckets[b].push(coord);
    }

    let mut rot = vec![0.0f64; dim * dim];
    for (r, coord) in buckets.into_iter().flatten().enumerate() {
        rot[r * dim + coord] = 1.0;
    }
    rot
}

#[inline]
fn apply_rotation(rot: &[f64], x: &[f64], out: &mut [f64]) {
    let dim = x.len();
    for (a, o) in out.iter_mut().enumerate() {
        let row = &rot[a * dim..(a + 1) * dim];
        let mut acc = 0.0;
        for (r, v) in row.iter().zip(x) {
            acc += r * v;
        }
        *o = acc;
    }
}

fn encode_raw(books: &[Vec<Vec<f64>>], sub_dim: usize, y: &[f64]) -> Vec<u8> {
    let mut code = Vec::with_capacity(books.len());
    for (m, book) in books.iter().enumerate() {
        let slice = &y[m * sub_dim..(m + 1) * sub_dim];
        let mut best = (f64::INFINITY, 0usize);
        for (j, centroid) in book.iter().enumerate() {
            let d = l2_sq(slice, centroid);
            if d < best.0 {
                best = (d, j);
            }
        }
        code.push(best.1 as u8);
    }
    code
}

fn decode_raw(books: &[Vec<Vec<f64>>], sub_dim: usize, code: &[u8]) -> Vec<f64> {
    let mut out = Vec::with_capacity(books.len() * sub_dim);
    for (m, &byte) in code.iter().enumerate() {
        out.extend_from_slice(&books[m][byte as usize]);
    }
    out
}

/// Max absolute deviation of `R^T R` from identity.
fn rotation_defect(rot: &[f64], dim: usize) -> f64 {
    let mut defect = 0.0f64;
    for a in 0..dim {
        for b in 0..dim {
            let mut g = 0.0;
            for r in 0..dim {
                g += rot[r * dim + a] * rot[r * dim + b];
            }
            let target = if a == b { 1.0 } else { 0.0 };
            defect = defect.max((g - target).abs());
        }
    }
    defect
}
