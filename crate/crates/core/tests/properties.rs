//! Property tests: distance axioms, quantizer oracles, and determinism.
//!
//! Every non-trivial expectation is checked against an independent
//! brute-force oracle written inline, not against the library's own code
//! paths.

use embr_core::{
    cosine_distance, cosine_similarity, euclidean_distance_sq, l2_normalize,
    train_kmeans_traced, train_pq, Vector64,
};
use proptest::prelude::*;

fn finite_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, dim)
}

fn nonzero_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    finite_vec(dim).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-6))
}

fn vec_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..8).prop_flat_map(|dim| (nonzero_vec(dim), nonzero_vec(dim)))
}

proptest! {
    #[test]
    fn cosine_distance_is_symmetric_and_bounded((a, b) in vec_pair()) {
        let va = Vector64::new(a).unwrap();
        let vb = Vector64::new(b).unwrap();
        let ab = cosine_distance(&va, &vb).unwrap();
        let ba = cosine_distance(&vb, &va).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=2.0).contains(&ab));
        prop_assert!(cosine_distance(&va, &va).unwrap().abs() < 1e-12);
    }

    #[test]
    fn cosine_is_invariant_under_positive_scaling(
        (a, b) in vec_pair(),
        scale in 0.01f64..100.0,
    ) {
        let va = Vector64::new(a.clone()).unwrap();
        let vb = Vector64::new(b).unwrap();
        let scaled = Vector64::new(a.iter().map(|x| x * scale).collect()).unwrap();
        let before = cosine_similarity(&va, &vb).unwrap();
        let after = cosine_similarity(&scaled, &vb).unwrap();
        prop_assert!((before - after).abs() < 1e-9);
    }

    #[test]
    fn unit_vectors_tie_cosine_to_euclidean((a, b) in vec_pair()) {
        let ua = l2_normalize(&Vector64::new(a).unwrap()).unwrap();
        let ub = l2_normalize(&Vector64::new(b).unwrap()).unwrap();
        let cos_dist = cosine_distance(&ua, &ub).unwrap();
        let half_l2 = euclidean_distance_sq(&ua, &ub).unwrap() / 2.0;
        prop_assert!((cos_dist - half_l2).abs() < 1e-9);
    }

    #[test]
    fn normalize_is_idempotent(v in nonzero_vec(5)) {
        let once = l2_normalize(&Vector64::new(v).unwrap()).unwrap();
        let twice = l2_normalize(&once).unwrap();
        for (x, y) in once.components().iter().zip(twice.components()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

/// Exhaustive oracle: SSE of the best split of `points` into two non-empty
/// groups, each represented by its mean.
fn best_two_partition_sse(points: &[Vec<f64>]) -> f64 {
    let n = points.len();
    let dim = points[0].len();
    let mut best = f64::INFINITY;
    for mask in 1..(1u32 << n) - 1 {
        let mut sums = [vec![0.0; dim], vec![0.0; dim]];
        let mut counts = [0usize; 2];
        for (i, p) in points.iter().enumerate() {
            let side = ((mask >> i) & 1) as usize;
            counts[side] += 1;
            for (s, x) in sums[side].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut sse = 0.0;
        for (i, p) in points.iter().enumerate() {
            let side = ((mask >> i) & 1) as usize;
            for (s, x) in sums[side].iter().zip(p) {
                let d = x - s / counts[side] as f64;
                sse += d * d;
            }
        }
        best = best.min(sse);
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kmeans_never_beats_the_exhaustive_two_partition_oracle(
        points in prop::collection::vec(finite_vec(2), 4..8),
        seed in 0u64..1000,
    ) {
        let vs: Vec<Vector64> =
            points.iter().map(|p| Vector64::new(p.clone()).unwrap()).collect();
        let (_, trace) = train_kmeans_traced(&vs, 2, seed, 40).unwrap();
        let optimal = best_two_partition_sse(&points);
        let achieved = *trace.last().unwrap();
        // Lloyd converges to a local optimum, which can never be better than
        // the global one.
        prop_assert!(achieved >= optimal - 1e-9, "achieved {achieved} < optimal {optimal}");
    }

    #[test]
    fn pq_encode_matches_exhaustive_subspace_scan(
        data in prop::collection::vec(finite_vec(4), 10..40),
        probe in finite_vec(4),
        seed in 0u64..100,
    ) {
        let vs: Vec<Vector64> =
            data.iter().map(|p| Vector64::new(p.clone()).unwrap()).collect();
        let pq = train_pq(&vs, 2, seed).unwrap();
        let code = pq.encode(&probe).unwrap();
        for m in 0..2 {
            let slice = &probe[m * 2..(m + 1) * 2];
            let mut best = (f64::INFINITY, 0usize);
            for (j, c) in pq.codebooks()[m].iter().enumerate() {
                let cv = c.to_f64_vec();
                let d = (slice[0] - cv[0]).powi(2) + (slice[1] - cv[1]).powi(2);
                if d < best.0 {
                    best = (d, j);
                }
            }
            prop_assert_eq!(code[m] as usize, best.1);
        }
    }

    #[test]
    fn adc_equals_distance_to_reconstruction(
        data in prop::collection::vec(finite_vec(4), 10..40),
        query in finite_vec(4),
        seed in 0u64..100,
    ) {
        let vs: Vec<Vector64> =
            data.iter().map(|p| Vector64::new(p.clone()).unwrap()).collect();
        let pq = train_pq(&vs, 2, seed).unwrap();
        let table = pq.adc_table(&query).unwrap();
        for v in &vs {
            let code = pq.encode(&v.to_f64_vec()).unwrap();
            let recon = pq.decode(&code).unwrap().to_f64_vec();
            let direct: f64 = query
                .iter()
                .zip(&recon)
                .map(|(q, r)| (q - r) * (q - r))
                .sum();
            prop_assert!((table.distance(&code) - direct).abs() < 1e-9);
        }
    }
}

/// Fixed worked example: four points in two obvious pairs. The exhaustive
/// partition oracle confirms the optimal centroids, and training must land
/// on exactly that solution.
#[test]
fn kmeans_matches_partition_oracle_on_two_pairs() {
    let points = vec![
        vec![0.0, 0.0],
        vec![0.0, 1.0],
        vec![10.0, 10.0],
        vec![10.0, 11.0],
    ];
    let vs: Vec<Vector64> = points.iter().map(|p| Vector64::new(p.clone()).unwrap()).collect();
    let (q, trace) = train_kmeans_traced(&vs, 2, 11, 40).unwrap();
    let optimal = best_two_partition_sse(&points);
    assert!((trace.last().unwrap() - optimal).abs() < 1e-9);
    let mut centroids: Vec<Vec<f64>> = q.centroids().iter().map(|c| c.to_f64_vec()).collect();
    centroids.sort_by(|a, b| a[0].total_cmp(&b[0]));
    assert_eq!(centroids[0], vec![0.0, 0.5]);
    assert_eq!(centroids[1], vec![10.0, 10.5]);
}

/// k = 1 must produce exactly the mean.
#[test]
fn kmeans_single_cluster_is_the_mean() {
    let vs: Vec<Vector64> = [[1.0, 2.0], [3.0, 6.0], [5.0, 1.0]]
        .iter()
        .map(|p| Vector64::new(p.to_vec()).unwrap())
        .collect();
    let (q, _) = train_kmeans_traced(&vs, 1, 0, 5).unwrap();
    let c = q.centroid(0).to_f64_vec();
    assert!((c[0] - 3.0).abs() < 1e-12);
    assert!((c[1] - 3.0).abs() < 1e-12);
}
