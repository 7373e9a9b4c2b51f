//! Coarse quantizer: k-means clustering over embedding vectors.
//!
//! Training runs entirely in `f64` and rounds centroids to the storage
//! scalar once at the end, so the per-iteration SSE guarantee is not
//! disturbed by storage rounding.

use crate::vector::DenseVector;
use crate::{l2_sq, MatrixF64, QuantError, Scalar};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Relative SSE improvement below which Lloyd iteration stops early.
const CONVERGENCE_REL_TOL: f64 = 1e-7;

/// Cluster centroids produced by [`train_kmeans`].
///
/// Cluster ids are centroid indices; assignment ties break toward the lower
/// id so that equal inputs always map to equal clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseQuantizer<S: Scalar> {
    centroids: Vec<DenseVector<S>>,
}

impl<S: Scalar> CoarseQuantizer<S> {
    /// Wraps pre-trained centroids (used when loading persisted indexes).
    pub fn new(centroids: Vec<DenseVector<S>>) -> Result<Self, QuantError> {
        if centroids.is_empty() {
            return Err(QuantError::EmptyTrainingSet);
        }
        let dim = centroids[0].dim();
        for c in &centroids {
            if c.dim() != dim {
                return Err(QuantError::DimensionMismatch { expected: dim, got: c.dim() });
            }
        }
        Ok(Self { centroids })
    }

    pub fn num_clusters(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids[0].dim()
    }

    pub fn centroids(&self) -> &[DenseVector<S>] {
        &self.centroids
    }

    pub fn centroid(&self, cluster: usize) -> &DenseVector<S> {
        &self.centroids[cluster]
    }

    /// Returns the `n` nearest cluster ids by squared Euclidean distance,
    /// closest first; distance ties order by ascending cluster id.
    pub fn assign(&self, query: &[f64], n: usize) -> Result<Vec<usize>, QuantError> {
        if query.len() != self.dim() {
            return Err(QuantError::DimensionMismatch { expected: self.dim(), got: query.len() });
        }
        if n == 0 || n > self.num_clusters() {
            return Err(QuantError::InvalidClusterCount { k: n, n: self.num_clusters() });
        }
        let mut ranked: Vec<(f64, usize)> = self
            .centroids
            .iter()
            .enumerate()
            .map(|(id, c)| {
                let mut acc = 0.0;
                for (q, x) in query.iter().zip(c.components()) {
                    let d = q - x.to_f64_lossy();
                    acc += d * d;
                }
                (acc, id)
            })
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(ranked.into_iter().take(n).map(|(_, id)| id).collect())
    }

    /// Nearest single cluster id.
    pub fn assign_one(&self, query: &[f64]) -> Result<usize, QuantError> {
        Ok(self.assign(query, 1)?[0])
    }
}

/// Runs k-means (k-means++ seeding, then Lloyd iterations) and returns the
/// trained quantizer. Deterministic for a given `(vectors, k, seed)`.
pub fn train_kmeans<S: Scalar>(
    vectors: &[DenseVector<S>],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<CoarseQuantizer<S>, QuantError> {
    Ok(train_kmeans_traced(vectors, k, seed, max_iters)?.0)
}

/// [`train_kmeans`] variant that also returns the SSE measured at each
/// assignment step. The trace is non-increasing; tests assert on it.
pub fn train_kmeans_traced<S: Scalar>(
    vectors: &[DenseVector<S>],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<(CoarseQuantizer<S>, Vec<f64>), QuantError> {
    if vectors.is_empty() {
        return Err(QuantError::EmptyTrainingSet);
    }
    let n = vectors.len();
    if k == 0 || k > n {
        return Err(QuantError::InvalidClusterCount { k, n });
    }
    let dim = vectors[0].dim();
    for v in vectors {
        if v.dim() != dim {
            return Err(QuantError::DimensionMismatch { expected: dim, got: v.dim() });
        }
    }

    let data = MatrixF64::from_vectors(vectors);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(&data, k, &mut rng);

    let mut assignment = vec![0usize; n];
    let mut sse_trace = Vec::new();
    for _ in 0..max_iters {
        let sse = assign_all(&data, &centroids, &mut assignment);
        if let Some(&prev) = sse_trace.last() {
            // Lloyd with exact means never increases SSE; tolerate only
            // accumulation roundoff.
            debug_assert!(sse <= prev * (1.0 + 1e-9) + 1e-12);
            sse_trace.push(sse);
            if prev - sse < CONVERGENCE_REL_TOL * prev.max(f64::MIN_POSITIVE) {
                break;
            }
        } else {
            sse_trace.push(sse);
        }
        update_centroids(&data, &assignment, &mut centroids);
        repair_empty_clusters(&data, &mut assignment, &mut centroids);
    }

    let centroids = centroids
        .data
        .chunks(dim)
        .map(|row| DenseVector::from_f64(row).map_err(QuantError::from))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((CoarseQuantizer { centroids }, sse_trace))
}

/// k-means++ seeding: first centroid uniform, each subsequent centroid drawn
/// with probability proportional to its squared distance from the chosen set.
/// When every remaining point coincides with a chosen centroid, falls back to
/// the first unchosen index so seeding stays total and deterministic.
fn plus_plus_init(data: &MatrixF64, k: usize, rng: &mut ChaCha8Rng) -> MatrixF64 {
    let n = data.rows;
    let dim = data.cols;
    let mut centroids = MatrixF64::zeros(k, dim);
    let mut chosen = vec![false; n];

    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(data.row(first));
    chosen[first] = true;

    let mut dist_sq: Vec<f64> = (0..n).map(|i| l2_sq(data.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = dist_sq.iter().sum();
        let pick = if total > 0.0 {
            let r = rng.random::<f64>() * total;
            let mut cum = 0.0;
            let mut pick = None;
            for (i, &d) in dist_sq.iter().enumerate() {
                cum += d;
                if cum > r {
                    pick = Some(i);
                    break;
                }
            }
            // Roundoff can leave cum marginally below total; take the last
            // point that still has positive weight.
            pick.unwrap_or_else(|| {
                dist_sq.iter().rposition(|&d| d > 0.0).expect("total > 0 implies a positive weight")
            })
        } else {
            chosen.iter().position(|&c| !c).expect("k <= n guarantees an unchosen point")
        };
        chosen[pick] = true;
        let row = data.row(pick).to_vec();
        centroids.row_mut(c).copy_from_slice(&row);
        for i in 0..n {
            let d = l2_sq(data.row(i), &row);
            if d < dist_sq[i] {
                dist_sq[i] = d;
            }
        }
    }
    centroids
}

/// Assigns every point to its nearest centroid (ties to the lower id) and
/// returns the summed squared error of that assignment.
fn assign_all(data: &MatrixF64, centroids: &MatrixF64, assignment: &mut [usize]) -> f64 {
    let mut sse = 0.0;
    for i in 0..data.rows {
        let point = data.row(i);
        let mut best = (f64::INFINITY, 0usize);
        for c in 0..centroids.rows {
            let d = l2_sq(point, centroids.row(c));
            if d < best.0 {
                best = (d, c);
            }
        }
        assignment[i] = best.1;
        sse += best.0;
    }
    sse
}

fn update_centroids(data: &MatrixF64, assignment: &[usize], centroids: &mut MatrixF64) {
    let dim = data.cols;
    let mut counts = vec![0usize; centroids.rows];
    let mut sums = MatrixF64::zeros(centroids.rows, dim);
    for (i, &c) in assignment.iter().enumerate() {
        counts[c] += 1;
        let row = data.row(i);
        let sum = sums.row_mut(c);
        for (s, x) in sum.iter_mut().zip(row) {
            *s += x;
        }
    }
    for c in 0..centroids.rows {
        if counts[c] == 0 {
            continue; // handled by repair_empty_clusters
        }
        let inv = 1.0 / counts[c] as f64;
        let sum = sums.row(c).to_vec();
        for (dst, s) in centroids.row_mut(c).iter_mut().zip(sum) {
            *dst = s * inv;
        }
    }
}

/// Moves each empty cluster's centroid onto the point currently farthest
/// from its own centroid, reassigning that point so successive repairs pick
/// distinct points. Splitting the worst point into its own cluster strictly
/// reduces SSE, preserving the monotonicity guarantee.
fn repair_empty_clusters(data: &MatrixF64, assignment: &mut [usize], centroids: &mut MatrixF64) {
    let mut counts = vec![0usize; centroids.rows];
    for &c in assignment.iter() {
        counts[c] += 1;
    }
    let empties: Vec<usize> = (0..centroids.rows).filter(|&c| counts[c] == 0).collect();
    if empties.is_empty() {
        return;
    }
    for empty in empties {
        let mut farthest = (f64::NEG_INFINITY, 0usize);
        for i in 0..data.rows {
            // Skip points that are alone in their cluster; stealing one would
            // just move the empty slot around.
            if counts[assignment[i]] <= 1 {
                continue;
            }
            let d = l2_sq(data.row(i), centroids.row(assignment[i]));
            if d > farthest.0 {
                farthest = (d, i);
            }
        }
        let (_, point) = farthest;
        counts[assignment[point]] -= 1;
        assignment[point] = empty;
        counts[empty] = 1;
        let row = data.row(point).to_vec();
        centroids.row_mut(empty).copy_from_slice(&row);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Vector64;

    fn points(rows: &[&[f64]]) -> Vec<Vector64> {
        rows.iter().map(|r| Vector64::new(r.to_vec()).unwrap()).collect()
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let vs = points(&[&[0.0, 0.0], &[1.0, 1.0]]);
        assert!(matches!(
            train_kmeans(&[] as &[Vector64], 1, 0, 10),
            Err(QuantError::EmptyTrainingSet)
        ));
        assert!(matches!(
            train_kmeans(&vs, 0, 0, 10),
            Err(QuantError::InvalidClusterCount { k: 0, n: 2 })
        ));
        assert!(matches!(
            train_kmeans(&vs, 3, 0, 10),
            Err(QuantError::InvalidClusterCount { k: 3, n: 2 })
        ));
        let ragged = vec![
            Vector64::new(vec![0.0, 0.0]).unwrap(),
            Vector64::new(vec![0.0]).unwrap(),
        ];
        assert!(matches!(
            train_kmeans(&ragged, 1, 0, 10),
            Err(QuantError::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn two_separated_blobs_recover_their_means() {
        // Blob A around (0, 0), blob B around (10, 10). With k = 2 the only
        // stable solution is the pair of blob means, computed here by hand.
        let vs = points(&[
            &[0.0, 0.0],
            &[1.0, 0.0],
            &[0.0, 1.0],
            &[10.0, 10.0],
            &[11.0, 10.0],
            &[10.0, 11.0],
        ]);
        let q = train_kmeans(&vs, 2, 7, 50).unwrap();
        let mut got: Vec<Vec<f64>> = q.centroids().iter().map(|c| c.to_f64_vec()).collect();
        got.sort_by(|a, b| a[0].total_cmp(&b[0]));
        let want_a = [1.0 / 3.0, 1.0 / 3.0];
        let want_b = [31.0 / 3.0, 31.0 / 3.0];
        for (g, w) in got[0].iter().zip(want_a) {
            assert!((g - w).abs() < 1e-12);
        }
        for (g, w) in got[1].iter().zip(want_b) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn sse_trace_is_monotone_non_increasing() {
        let mut vs = Vec::new();
        // Deterministic pseudo-grid with enough spread to need iterations.
        for i in 0..40 {
            let x = (i % 8) as f64 + 0.01 * i as f64;
            let y = (i / 8) as f64 - 0.02 * i as f64;
            vs.push(Vector64::new(vec![x, y]).unwrap());
        }
        let (_, trace) = train_kmeans_traced(&vs, 5, 3, 30).unwrap();
        assert!(!trace.is_empty());
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-12, "SSE rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn same_seed_reproduces_centroids_bitwise() {
        let vs: Vec<Vector64> = (0..30)
            .map(|i| {
                let t = i as f64;
                Vector64::new(vec![t.sin(), (2.0 * t).cos(), 0.1 * t]).unwrap()
            })
            .collect();
        let a = train_kmeans(&vs, 4, 42, 25).unwrap();
        let b = train_kmeans(&vs, 4, 42, 25).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn k_equals_n_on_distinct_points_reaches_zero_sse() {
        let vs = points(&[&[0.0], &[1.0], &[5.0], &[9.0]]);
        let (q, trace) = train_kmeans_traced(&vs, 4, 0, 20).unwrap();
        assert_eq!(q.num_clusters(), 4);
        assert!(trace.last().unwrap() < &1e-18);
    }

    #[test]
    fn assign_orders_by_distance_then_id() {
        let q = CoarseQuantizer::new(points(&[&[0.0], &[2.0], &[10.0]])).unwrap();
        // Query 1.0 is equidistant from centroids 0 and 1; the tie breaks to
        // the lower id.
        assert_eq!(q.assign(&[1.0], 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(q.assign(&[9.5], 2).unwrap(), vec![2, 1]);
        assert_eq!(q.assign_one(&[1.9]).unwrap(), 1);
    }

    #[test]
    fn assign_validates_arguments() {
        let q = CoarseQuantizer::new(points(&[&[0.0], &[2.0]])).unwrap();
        assert!(matches!(
            q.assign(&[0.0, 1.0], 1),
            Err(QuantError::DimensionMismatch { expected: 1, got: 2 })
        ));
        assert!(q.assign(&[0.0], 0).is_err());
        assert!(q.assign(&[0.0], 3).is_err());
    }
}
