//! Quantized embedding segments embedded in the inverted index.
//!
//! A segment turns each document embedding into a coarse cluster id (a
//! synthetic term) plus a payload code. With `pq_bytes > 0` the code is the
//! product-quantized residual against the coarse centroid, computed in the
//! transformed space. With `pq_bytes == 0` (Flat) the code is the stored
//! f32 components verbatim, so scanning reconstructs exactly the indexed
//! bits and search over all clusters is exact.

use crate::EngineError;
use embr_core::config::{AnnConfig, TransformSpec};
use embr_core::{
    train_kmeans, train_opq, train_pca, train_pq, CoarseQuantizer, DenseVector,
    ProductQuantizer, Transform,
};

/// Lloyd iteration cap for the coarse quantizer; convergence usually stops
/// training earlier via the relative-improvement tolerance.
pub(crate) const COARSE_KMEANS_ITERS: usize = 50;

/// One quantized vector: the owning document's ordinal and its payload code.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentEntry {
    pub doc_ordinal: u32,
    pub code: Vec<u8>,
}

/// All vectors assigned to one coarse cluster, sorted strictly ascending by
/// ordinal. Entries may reference tombstoned ordinals until compaction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClusterPosting {
    pub entries: Vec<SegmentEntry>,
}

/// Trained quantizers plus the per-cluster posting lists for one embedding
/// key.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnSegment {
    pub(crate) key: String,
    pub(crate) config: AnnConfig,
    pub(crate) input_dim: usize,
    pub(crate) transform: Transform<f64>,
    pub(crate) coarse: CoarseQuantizer<f64>,
    pub(crate) pq: Option<ProductQuantizer<f64>>,
    pub(crate) clusters: Vec<ClusterPosting>,
}

/// Trains transform, then coarse quantizer, then PQ on coarse residuals,
/// and encodes every input vector. `vectors` are (ordinal, components)
/// pairs in ascending ordinal order; the index hands in unit-norm vectors.
pub fn build_ann_segment(
    key: &str,
    dim: usize,
    vectors: &[(u32, Vec<f64>)],
    config: &AnnConfig,
) -> Result<AnnSegment, EngineError> {
    config.validate(dim)?;
    let needed = config.num_clusters.max(1);
    if vectors.len() < needed {
        return Err(EngineError::TooFewVectors {
            key: key.to_string(),
            needed,
            got: vectors.len(),
        });
    }
    let mut dense = Vec::with_capacity(vectors.len());
    for (_, v) in vectors {
        if v.len() != dim {
            return Err(EngineError::EmbeddingDimMismatch {
                key: key.to_string(),
                expected: dim,
                got: v.len(),
            });
        }
        dense.push(DenseVector::<f64>::new(v.clone())?);
    }

    let transform = match config.transform {
        TransformSpec::None => Transform::identity(dim),
        TransformSpec::Pca { out_dim } => train_pca(&dense, out_dim)?,
        // OPQ hands back a PQ trained on rotated raw vectors; only the
        // rotation is kept, because codes here quantize coarse residuals.
        TransformSpec::Opq { outer_iters } => {
            train_opq(&dense, config.pq_bytes, config.seed, outer_iters)?.0
        }
    };
    let transformed: Vec<Vec<f64>> = dense
        .iter()
        .map(|v| transform.apply(v.components()))
        .collect::<Result<_, _>>()?;
    let t_dense: Vec<DenseVector<f64>> = transformed
        .iter()
        .map(|t| DenseVector::new(t.clone()))
        .collect::<Result<_, _>>()?;

    let coarse = train_kmeans(&t_dense, config.num_clusters, config.seed, COARSE_KMEANS_ITERS)?;
    let assignments: Vec<usize> = transformed
        .iter()
        .map(|t| coarse.assign_one(t))
        .collect::<Result<_, _>>()?;

    let pq = if config.is_flat() {
        None
    } else {
        let residuals: Vec<DenseVector<f64>> = transformed
            .iter()
            .zip(&assignments)
            .map(|(t, &c)| {
                let centroid = coarse.centroid(c).components();
                DenseVector::new(t.iter().zip(centroid).map(|(a, b)| a - b).collect())
            })
            .collect::<Result<_, _>>()?;
        Some(train_pq(&residuals, config.pq_bytes, config.seed)?)
    };

    let mut clusters = vec![ClusterPosting::default(); config.num_clusters];
    for (i, (ordinal, raw)) in vectors.iter().enumerate() {
        let cluster = assignments[i];
        let code = match &pq {
            None => flat_code(raw),
            Some(pq) => {
                let centroid = coarse.centroid(cluster).components();
                let residual: Vec<f64> =
                    transformed[i].iter().zip(centroid).map(|(a, b)| a - b).collect();
                pq.encode(&residual)?
            }
        };
        let entries = &mut clusters[cluster].entries;
        debug_assert!(entries.last().is_none_or(|e| e.doc_ordinal < *ordinal));
        entries.push(SegmentEntry { doc_ordinal: *ordinal, code });
    }

    Ok(AnnSegment {
        key: key.to_string(),
        config: config.clone(),
        input_dim: dim,
        transform,
        coarse,
        pq,
        clusters,
    })
}

/// f32 little-endian components, verbatim.
fn flat_code(v: &[f64]) -> Vec<u8> {
    let mut code = Vec::with_capacity(v.len() * 4);
    for &x in v {
        code.extend_from_slice(&(x as f32).to_le_bytes());
    }
    code
}

/// Inverse of [`flat_code`].
pub(crate) fn flat_components(code: &[u8]) -> Vec<f32> {
    debug_assert_eq!(code.len() % 4, 0);
    code.chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect()
}

impl AnnSegment {
    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn config(&self) -> &AnnConfig {
        &self.config
    }

    /// Dimension of embeddings fed into the segment (before any transform).
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn transform(&self) -> &Transform<f64> {
        &self.transform
    }

    pub fn coarse(&self) -> &CoarseQuantizer<f64> {
        &self.coarse
    }

    pub fn pq(&self) -> Option<&ProductQuantizer<f64>> {
        self.pq.as_ref()
    }

    pub fn clusters(&self) -> &[ClusterPosting] {
        &self.clusters
    }

    /// Total entries across clusters, tombstoned ordinals included.
    pub fn num_vectors(&self) -> usize {
        self.clusters.iter().map(|c| c.entries.len()).sum()
    }

    /// Expected payload length in bytes.
    pub fn code_len(&self) -> usize {
        match &self.pq {
            None => self.input_dim * 4,
            Some(pq) => pq.num_subquantizers(),
        }
    }

    /// Quantizes one vector against the trained quantizers without mutating
    /// the segment. Returns the coarse cluster and the payload code.
    pub fn encode(&self, v: &[f64]) -> Result<(usize, Vec<u8>), EngineError> {
        if v.len() != self.input_dim {
            return Err(EngineError::EmbeddingDimMismatch {
                key: self.key.clone(),
                expected: self.input_dim,
                got: v.len(),
            });
        }
        let t = self.transform.apply(v)?;
        let cluster = self.coarse.assign_one(&t)?;
        let code = match &self.pq {
            None => flat_code(v),
            Some(pq) => {
                let centroid = self.coarse.centroid(cluster).components();
                let residual: Vec<f64> = t.iter().zip(centroid).map(|(a, b)| a - b).collect();
                pq.encode(&residual)?
            }
        };
        Ok((cluster, code))
    }

    /// Appends an encoded entry. Ordinals only ever grow, so pushing keeps
    /// the cluster posting sorted.
    pub(crate) fn push(&mut self, cluster: usize, ordinal: u32, code: Vec<u8>) {
        debug_assert_eq!(code.len(), self.code_len());
        let entries = &mut self.clusters[cluster].entries;
        debug_assert!(entries.last().is_none_or(|e| e.doc_ordinal < ordinal));
        entries.push(SegmentEntry { doc_ordinal: ordinal, code });
    }

    /// Rewrites entries through a monotone ordinal remap, dropping entries
    /// that map to `None`. Quantizers and codes are unchanged.
    pub(crate) fn remap(&self, remap: &[Option<u32>]) -> AnnSegment {
        let clusters = self
            .clusters
            .iter()
            .map(|cluster| ClusterPosting {
                entries: cluster
                    .entries
                    .iter()
                    .filter_map(|e| {
                        remap[e.doc_ordinal as usize].map(|new| SegmentEntry {
                            doc_ordinal: new,
                            code: e.code.clone(),
                        })
                    })
                    .collect(),
            })
            .collect();
        AnnSegment { clusters, ..self.clone() }
    }

    /// Rebuilds a segment from persisted parts, re-checking every structural
    /// invariant so a tampered file cannot produce an inconsistent segment.
    pub(crate) fn from_parts(
        key: String,
        config: AnnConfig,
        input_dim: usize,
        transform: Transform<f64>,
        coarse: CoarseQuantizer<f64>,
        pq: Option<ProductQuantizer<f64>>,
        clusters: Vec<ClusterPosting>,
    ) -> Result<AnnSegment, String> {
        config.validate(input_dim).map_err(|e| e.to_string())?;
        if transform.in_dim() != input_dim {
            return Err(format!(
                "transform input dim {} != segment dim {input_dim}",
                transform.in_dim()
            ));
        }
        let tdim = config.transformed_dim(input_dim);
        if transform.out_dim() != tdim {
            return Err(format!("transform output dim {} != {tdim}", transform.out_dim()));
        }
        if coarse.num_clusters() != config.num_clusters {
            return Err(format!(
                "coarse quantizer has {} clusters, config says {}",
                coarse.num_clusters(),
                config.num_clusters
            ));
        }
        if coarse.dim() != tdim {
            return Err(format!("coarse centroid dim {} != {tdim}", coarse.dim()));
        }
        if clusters.len() != config.num_clusters {
            return Err(format!(
                "{} cluster postings for {} clusters",
                clusters.len(),
                config.num_clusters
            ));
        }
        match (&pq, config.is_flat()) {
            (Some(_), true) => return Err("flat config with a product quantizer".into()),
            (None, false) => return Err("pq config without a product quantizer".into()),
            (Some(pq), false) => {
                if pq.num_subquantizers() != config.pq_bytes || pq.dim() != tdim {
                    return Err("product quantizer shape disagrees with config".into());
                }
            }
            (None, true) => {}
        }
        let segment = AnnSegment { key, config, input_dim, transform, coarse, pq, clusters };
        for cluster in &segment.clusters {
            for pair in cluster.entries.windows(2) {
                if pair[0].doc_ordinal >= pair[1].doc_ordinal {
                    return Err("cluster posting ordinals not strictly ascending".into());
                }
            }
            if let Some(bad) = cluster.entries.iter().find(|e| e.code.len() != segment.code_len())
            {
                return Err(format!(
                    "code length {} != expected {}",
                    bad.code.len(),
                    segment.code_len()
                ));
            }
        }
        Ok(segment)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_config(num_clusters: usize) -> AnnConfig {
        AnnConfig {
            num_clusters,
            nprobe_default: num_clusters,
            pq_bytes: 0,
            transform: TransformSpec::None,
            coarse_metric: Default::default(),
            seed: 11,
        }
    }

    fn pair_corpus() -> Vec<(u32, Vec<f64>)> {
        vec![
            (0, vec![0.0, 0.1]),
            (1, vec![0.1, 0.0]),
            (2, vec![10.0, 10.1]),
            (3, vec![10.1, 10.0]),
        ]
    }

    #[test]
    fn well_separated_pairs_land_in_separate_clusters() {
        let segment = build_ann_segment("m1", 2, &pair_corpus(), &flat_config(2)).unwrap();
        let mut cluster_sets: Vec<Vec<u32>> = segment
            .clusters()
            .iter()
            .map(|c| c.entries.iter().map(|e| e.doc_ordinal).collect())
            .collect();
        cluster_sets.sort();
        assert_eq!(cluster_sets, vec![vec![0, 1], vec![2, 3]]);
    }

    #[test]
    fn too_few_vectors_is_an_error() {
        let err = build_ann_segment("m1", 2, &pair_corpus(), &flat_config(5)).unwrap_err();
        assert!(matches!(
            err,
            EngineError::TooFewVectors { needed: 5, got: 4, .. }
        ));
    }

    #[test]
    fn flat_codes_reconstruct_the_input_bits_exactly() {
        let corpus = pair_corpus();
        let segment = build_ann_segment("m1", 2, &corpus, &flat_config(2)).unwrap();
        for cluster in segment.clusters() {
            for entry in &cluster.entries {
                let want: Vec<f32> =
                    corpus[entry.doc_ordinal as usize].1.iter().map(|&x| x as f32).collect();
                assert_eq!(flat_components(&entry.code), want);
            }
        }
    }

    fn random_unit_vectors(n: usize, dim: usize, seed: u64) -> Vec<(u32, Vec<f64>)> {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                (i as u32, v.iter().map(|x| x / norm).collect())
            })
            .collect()
    }

    #[test]
    fn pq_codes_have_pq_bytes_length_and_cover_every_ordinal() {
        let corpus = random_unit_vectors(40, 8, 3);
        let config = AnnConfig { pq_bytes: 4, ..flat_config(4) };
        let segment = build_ann_segment("m1", 8, &corpus, &config).unwrap();
        assert_eq!(segment.num_vectors(), 40);
        let mut seen: Vec<u32> = segment
            .clusters()
            .iter()
            .flat_map(|c| c.entries.iter().map(|e| e.doc_ordinal))
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..40).collect::<Vec<_>>());
        for cluster in segment.clusters() {
            for entry in &cluster.entries {
                assert_eq!(entry.code.len(), 4);
            }
        }
    }

    #[test]
    fn encode_agrees_with_build_time_assignment() {
        let corpus = random_unit_vectors(40, 8, 5);
        let config = AnnConfig { pq_bytes: 2, ..flat_config(3) };
        let segment = build_ann_segment("m1", 8, &corpus, &config).unwrap();
        for (ordinal, v) in &corpus {
            let (cluster, code) = segment.encode(v).unwrap();
            let entry = segment.clusters()[cluster]
                .entries
                .iter()
                .find(|e| e.doc_ordinal == *ordinal)
                .expect("vector in its assigned cluster");
            assert_eq!(entry.code, code);
        }
    }

    #[test]
    fn opq_transform_is_orthonormal_and_pca_reduces_dim() {
        let corpus = random_unit_vectors(64, 8, 9);
        let opq_config = AnnConfig {
            pq_bytes: 4,
            transform: TransformSpec::Opq { outer_iters: 3 },
            ..flat_config(2)
        };
        let segment = build_ann_segment("m1", 8, &corpus, &opq_config).unwrap();
        assert!(segment.transform().orthonormality_defect() < 1e-6);
        assert_eq!(segment.transform().out_dim(), 8);

        let pca_config = AnnConfig {
            pq_bytes: 2,
            transform: TransformSpec::Pca { out_dim: 4 },
            ..flat_config(2)
        };
        let segment = build_ann_segment("m1", 8, &corpus, &pca_config).unwrap();
        assert_eq!(segment.transform().out_dim(), 4);
        assert_eq!(segment.pq().unwrap().dim(), 4);
        assert_eq!(segment.code_len(), 2);
    }

    #[test]
    fn remap_drops_and_renumbers_monotonically() {
        let corpus = pair_corpus();
        let segment = build_ann_segment("m1", 2, &corpus, &flat_config(2)).unwrap();
        // Drop ordinal 1, shift the rest down.
        let remap = vec![Some(0), None, Some(1), Some(2)];
        let remapped = segment.remap(&remap);
        assert_eq!(remapped.num_vectors(), 3);
        let mut seen: Vec<u32> = remapped
            .clusters()
            .iter()
            .flat_map(|c| c.entries.iter().map(|e| e.doc_ordinal))
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2]);
        for cluster in remapped.clusters() {
            assert!(cluster.entries.windows(2).all(|w| w[0].doc_ordinal < w[1].doc_ordinal));
        }
    }

    #[test]
    fn determinism_same_seed_same_segment() {
        let corpus = random_unit_vectors(50, 8, 21);
        let config = AnnConfig { pq_bytes: 4, ..flat_config(4) };
        let a = build_ann_segment("m1", 8, &corpus, &config).unwrap();
        let b = build_ann_segment("m1", 8, &corpus, &config).unwrap();
        assert_eq!(a, b);
    }
}
