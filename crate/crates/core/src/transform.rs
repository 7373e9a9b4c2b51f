//! Trained linear transforms applied to vectors before coarse and product
//! quantization.

use crate::vector::DenseVector;
use crate::{QuantError, Scalar};

/// A trained vector transform.
///
/// `Pca` projects onto `components` after subtracting `mean` (rows are
/// orthonormal, possibly fewer than the input dimension). `Opq` multiplies by
/// a square orthonormal rotation learned jointly with a product quantizer.
/// Application happens in `f64` regardless of the stored scalar.
#[derive(Debug, Clone, PartialEq)]
pub enum Transform<S: Scalar> {
    Identity { dim: usize },
    Pca { mean: DenseVector<S>, components: Vec<DenseVector<S>> },
    Opq { rotation: Vec<DenseVector<S>> },
}

impl<S: Scalar> Transform<S> {
    pub fn identity(dim: usize) -> Self {
        Transform::Identity { dim }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Transform::Identity { dim } => *dim,
            Transform::Pca { mean, .. } => mean.dim(),
            Transform::Opq { rotation } => rotation[0].dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Transform::Identity { dim } => *dim,
            Transform::Pca { components, .. } => components.len(),
            Transform::Opq { rotation } => rotation.len(),
        }
    }

    /// Applies the transform in `f64`.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>, QuantError> {
        if v.len() != self.in_dim() {
            return Err(QuantError::DimensionMismatch { expected: self.in_dim(), got: v.len() });
        }
        match self {
            Transform::Identity { .. } => Ok(v.to_vec()),
            Transform::Pca { mean, components } => {
                let centered: Vec<f64> = v
                    .iter()
                    .zip(mean.components())
                    .map(|(x, m)| x - m.to_f64_lossy())
                    .collect();
                Ok(components.iter().map(|row| dot_row(row, &centered)).collect())
            }
            Transform::Opq { rotation } => {
                Ok(rotation.iter().map(|row| dot_row(row, v)).collect())
            }
        }
    }

    /// Largest absolute deviation of the row Gram matrix from identity.
    /// Zero for orthonormal rows; `Identity` is trivially orthonormal.
    pub fn orthonormality_defect(&self) -> f64 {
        let rows: &[DenseVector<S>] = match self {
            Transform::Identity { .. } => return 0.0,
            Transform::Pca { components, .. } => components,
            Transform::Opq { rotation } => rotation,
        };
        let mut defect = 0.0f64;
        for (i, a) in rows.iter().enumerate() {
            for (j, b) in rows.iter().enumerate() {
                let g = a
                    .components()
                    .iter()
                    .zip(b.components())
                    .map(|(x, y)| x.to_f64_lossy() * y.to_f64_lossy())
                    .sum::<f64>();
                let target = if i == j { 1.0 } else { 0.0 };
                defect = defect.max((g - target).abs());
            }
        }
        defect
    }
}

fn dot_row<S: Scalar>(row: &DenseVector<S>, v: &[f64]) -> f64 {
    row.components()
        .iter()
        .zip(v)
        .map(|(r, x)| r.to_f64_lossy() * x)
        .sum()
}
