//! ANN index configuration: coarse/product quantization parameters and the
//! pre-quantization transform to train.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Metric used for coarse cluster assignment. Embeddings are L2-normalized
/// before coarse quantization, which makes L2 ranking agree with cosine
/// ranking, so L2 is the only metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoarseMetric {
    #[default]
    L2,
}

/// Which transform to train before quantization.
///
/// `Pca` and `Opq` are mutually exclusive alternatives (this enum cannot
/// express both at once, by design).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformSpec {
    #[default]
    None,
    Pca {
        out_dim: usize,
    },
    Opq {
        outer_iters: usize,
    },
}

impl fmt::Display for TransformSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransformSpec::None => write!(f, "none"),
            TransformSpec::Pca { out_dim } => write!(f, "pca{out_dim}"),
            TransformSpec::Opq { .. } => write!(f, "opq"),
        }
    }
}

/// Parameters for building one ANN segment.
///
/// `pq_bytes == 0` selects Flat codes: vectors are stored at full storage
/// precision and search is exact over the scanned clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnConfig {
    pub num_clusters: usize,
    pub nprobe_default: usize,
    pub pq_bytes: usize,
    pub transform: TransformSpec,
    #[serde(default)]
    pub coarse_metric: CoarseMetric,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("num_clusters must be at least 1")]
    NoClusters,
    #[error("nprobe_default {nprobe} outside [1, {num_clusters}]")]
    NprobeOutOfRange { nprobe: usize, num_clusters: usize },
    #[error("pca out_dim {out_dim} invalid for dimension {dim}")]
    PcaDimInvalid { out_dim: usize, dim: usize },
    #[error("pq_bytes {pq_bytes} does not divide transformed dimension {dim}")]
    PqBytesIndivisible { pq_bytes: usize, dim: usize },
    #[error("transform {transform} requires pq_bytes > 0; flat codes store untransformed vectors")]
    TransformNeedsPq { transform: String },
}

impl AnnConfig {
    /// Dimension of vectors after the configured transform.
    pub fn transformed_dim(&self, dim: usize) -> usize {
        match self.transform {
            TransformSpec::Pca { out_dim } => out_dim,
            _ => dim,
        }
    }

    /// True when this config stores full-precision codes (no PQ).
    pub fn is_flat(&self) -> bool {
        self.pq_bytes == 0
    }

    /// Checks internal consistency against the embedding dimension the
    /// segment will hold.
    pub fn validate(&self, dim: usize) -> Result<(), ConfigError> {
        if self.num_clusters == 0 {
            return Err(ConfigError::NoClusters);
        }
        if self.nprobe_default == 0 || self.nprobe_default > self.num_clusters {
            return Err(ConfigError::NprobeOutOfRange {
                nprobe: self.nprobe_default,
                num_clusters: self.num_clusters,
            });
        }
        if let TransformSpec::Pca { out_dim } = self.transform {
            if out_dim == 0 || out_dim > dim {
                return Err(ConfigError::PcaDimInvalid { out_dim, dim });
            }
        }
        let tdim = self.transformed_dim(dim);
        if self.pq_bytes != 0 && tdim % self.pq_bytes != 0 {
            return Err(ConfigError::PqBytesIndivisible { pq_bytes: self.pq_bytes, dim: tdim });
        }
        if self.pq_bytes == 0 && self.transform != TransformSpec::None {
            return Err(ConfigError::TransformNeedsPq { transform: self.transform.to_string() });
        }
        Ok(())
    }
}
