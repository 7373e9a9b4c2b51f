//! PCA transform training: mean-centering plus projection onto the leading
//! principal components.

use crate::transform::Transform;
use crate::vector::DenseVector;
use crate::{MatrixF64, QuantError, Scalar};
use nalgebra::DMatrix;

/// Trains a PCA projection onto the top `out_dim` principal components.
///
/// Components are rows sorted by descending eigenvalue (index breaks exact
/// ties) with a canonical sign: the largest-magnitude entry of each row is
/// made positive, so training is deterministic for a given input.
pub fn train_pca<S: Scalar>(
    vectors: &[DenseVector<S>],
    out_dim: usize,
) -> Result<Transform<S>, QuantError> {
    if vectors.is_empty() {
        return Err(QuantError::EmptyTrainingSet);
    }
    let dim = vectors[0].dim();
    for v in vectors {
        if v.dim() != dim {
            return Err(QuantError::DimensionMismatch { expected: dim, got: v.dim() });
        }
    }
    if out_dim == 0 || out_dim > dim {
        return Err(QuantError::OutputDimTooLarge { out_dim, dim });
    }
    let n = vectors.len();
    if n < out_dim.max(2) {
        return Err(QuantError::InsufficientSamples { n, out_dim });
    }

    let data = MatrixF64::from_vectors(vectors);
    let mut mean = vec![0.0f64; dim];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(data.row(i)) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    // Population covariance of the centered data.
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..n {
        let row = data.row(i);
        for a in 0..dim {
            let da = row[a] - mean[a];
            for b in a..dim {
                let db = row[b] - mean[b];
                cov[(a, b)] += da * db;
            }
        }
    }
    for a in 0..dim {
        for b in a..dim {
            let v = cov[(a, b)] / n as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }

    let eigen = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eigen.eigenvalues[b]
            .total_cmp(&eigen.eigenvalues[a])
            .then(a.cmp(&b))
    });

    let mut components = Vec::with_capacity(out_dim);
    for &col in order.iter().take(out_dim) {
        let mut row: Vec<f64> = eigen.eigenvectors.column(col).iter().copied().collect();
        canonicalize_sign(&mut row);
        components.push(DenseVector::from_f64(&row)?);
    }
    let transform = Transform::Pca { mean: DenseVector::from_f64(&mean)?, components };
    debug_assert!(transform.orthonormality_defect() < 1e-6);
    Ok(transform)
}

/// Flips the row so its largest-magnitude entry (first such entry on ties)
/// is non-negative.
fn canonicalize_sign(row: &mut [f64]) {
    let mut lead = 0usize;
    for (i, x) in row.iter().enumerate() {
        if x.abs() > row[lead].abs() {
            lead = i;
        }
    }
    if row[lead] < 0.0 {
        for x in row.iter_mut() {
            *x = -*x;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{l2_sq, Vector64};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn points(rows: &[&[f64]]) -> Vec<Vector64> {
        rows.iter().map(|r| Vector64::new(r.to_vec()).unwrap()).collect()
    }

    #[test]
    fn validates_dimensions_and_sample_count() {
        let vs = points(&[&[0.0, 0.0], &[1.0, 1.0], &[2.0, 0.0]]);
        assert!(matches!(
            train_pca(&vs, 0),
            Err(QuantError::OutputDimTooLarge { out_dim: 0, dim: 2 })
        ));
        assert!(matches!(
            train_pca(&vs, 3),
            Err(QuantError::OutputDimTooLarge { out_dim: 3, dim: 2 })
        ));
        let one = points(&[&[0.0, 0.0]]);
        assert!(matches!(
            train_pca(&one, 1),
            Err(QuantError::InsufficientSamples { n: 1, out_dim: 1 })
        ));
    }

    #[test]
    fn axis_aligned_covariance_yields_axis_components() {
        // Symmetric points: covariance is exactly diag(4.5, 0.5, 0), so the
        // principal components are the x and y axes in that order.
        let vs = points(&[
            &[3.0, 0.0, 0.0],
            &[-3.0, 0.0, 0.0],
            &[0.0, 1.0, 0.0],
            &[0.0, -1.0, 0.0],
        ]);
        let t = train_pca(&vs, 2).unwrap();
        let Transform::Pca { mean, components } = &t else { panic!() };
        for m in mean.components() {
            assert!(m.abs() < 1e-12);
        }
        let c0 = components[0].to_f64_vec();
        let c1 = components[1].to_f64_vec();
        assert!((c0[0] - 1.0).abs() < 1e-9 && c0[1].abs() < 1e-9 && c0[2].abs() < 1e-9);
        assert!(c1[0].abs() < 1e-9 && (c1[1] - 1.0).abs() < 1e-9 && c1[2].abs() < 1e-9);
        // Projection of (3, 0, 0) onto those axes.
        assert_eq!(t.apply(&[3.0, 0.0, 0.0]).unwrap(), vec![3.0, 0.0]);
    }

    #[test]
    fn collinear_points_project_to_their_line_coordinate() {
        // Points on the line y = 2x: the single component must be
        // (1, 2) / sqrt(5), and each projection the signed distance along it.
        let vs = points(&[&[-1.0, -2.0], &[0.0, 0.0], &[1.0, 2.0], &[2.0, 4.0]]);
        let t = train_pca(&vs, 1).unwrap();
        let Transform::Pca { components, .. } = &t else { panic!() };
        let c = components[0].to_f64_vec();
        let s5 = 5.0f64.sqrt();
        assert!((c[0] - 1.0 / s5).abs() < 1e-9);
        assert!((c[1] - 2.0 / s5).abs() < 1e-9);
        // Mean is (0.5, 1.0); projection of (1, 2) is ((0.5, 1.0) . c).
        let got = t.apply(&[1.0, 2.0]).unwrap()[0];
        assert!((got - (0.5 / s5 + 2.0 / s5)).abs() < 1e-9);
    }

    #[test]
    fn full_rank_pca_preserves_pairwise_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let vs: Vec<Vector64> = (0..50)
            .map(|_| {
                Vector64::new((0..6).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect())
                    .unwrap()
            })
            .collect();
        let t = train_pca(&vs, 6).unwrap();
        assert!(t.orthonormality_defect() < 1e-9);
        for pair in vs.windows(2) {
            let a = pair[0].to_f64_vec();
            let b = pair[1].to_f64_vec();
            let before = l2_sq(&a, &b);
            let after = l2_sq(&t.apply(&a).unwrap(), &t.apply(&b).unwrap());
            assert!((before - after).abs() < 1e-9 * before.max(1.0));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vs: Vec<Vector64> = (0..40)
            .map(|_| {
                Vector64::new((0..4).map(|_| rng.random::<f64>()).collect()).unwrap()
            })
            .collect();
        let a = train_pca(&vs, 2).unwrap();
        let b = train_pca(&vs, 2).unwrap();
        assert_eq!(a, b);
    }
}
