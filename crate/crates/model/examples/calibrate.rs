//! Scratch calibration rig: measures the mining-source recall orderings,
//! margin sensitivity, and quantization sweep shape that the acceptance
//! suite asserts, so the frozen constants are picked from data.

use embr_core::{cosine_distance, DenseVector, Vector32, Vector64};
use embr_engine::{Document, Index};
use embr_model::encoder::TwoTower;
use embr_model::eval::{recall_at_k, run_sweep, EvalSession, SweepGrid, TimingMode};
use embr_model::mining::{MiningConfig, NegativeSource};
use embr_model::synth::{encoder_config, generate, SynthConfig};
use embr_model::train::{train, Hyperparams};
use embr_model::ModelError;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::{BTreeMap, BTreeSet};

fn full_index_recall_at_10(
    two: &TwoTower,
    corpus: &BTreeMap<String, embr_engine::FeatureRecord>,
    eval: &[EvalSession],
) -> Result<f64, ModelError> {
    let doc_embs: Vec<(String, Vector64)> = corpus
        .iter()
        .map(|(id, rec)| Ok((id.clone(), two.doc.encode(rec)?)))
        .collect::<Result<_, ModelError>>()?;
    let mut total = 0.0;
    for session in eval {
        let q = two.query.encode(&session.query)?;
        let mut scored: Vec<(&String, f64)> = doc_embs
            .iter()
            .map(|(id, e)| Ok((id, cosine_distance(&q, e)?)))
            .collect::<Result<_, ModelError>>()?;
        scored.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
        let ranked: Vec<String> = scored.iter().take(10).map(|(id, _)| (*id).clone()).collect();
        total += recall_at_k(&ranked, &session.target_ids, 10)?;
    }
    Ok(total / eval.len() as f64)
}

fn mining_run(
    seed: u64,
    source: NegativeSource,
    hp: &Hyperparams,
    sc: &SynthConfig,
) -> Result<f64, ModelError> {
    let sc = SynthConfig { seed, ..sc.clone() };
    let data = generate(&sc)?;
    let (enc, shared) = encoder_config(&sc);
    let mut two = TwoTower::init(enc.clone(), enc, shared, seed)?;
    let corpus: BTreeMap<String, embr_engine::FeatureRecord> = data
        .corpus
        .iter()
        .map(|d| (d.doc_id.clone(), d.features.clone()))
        .collect();
    let mining = MiningConfig { negative_source: source, ..MiningConfig::default() };
    let hp = Hyperparams { seed, ..hp.clone() };
    train(&mut two, &corpus, &data.train, &data.sessions, &mining, &hp)?;
    full_index_recall_at_10(&two, &corpus, &data.eval)
}

fn mining_table(hp: &Hyperparams, sc: &SynthConfig) {
    let sources = [
        NegativeSource::Random,
        NegativeSource::OnlineHard,
        NegativeSource::NonClickImpressions,
        NegativeSource::OfflineHard,
        NegativeSource::Mixed,
    ];
    println!(
        "# mining: epochs {} lr {} margin {} batch {} docs {} pairs {}",
        hp.epochs, hp.lr, hp.margin, hp.batch_size, sc.num_docs, sc.train_pairs
    );
    let mut means = BTreeMap::new();
    for source in sources {
        let mut row = Vec::new();
        for seed in 0..5u64 {
            let t = std::time::Instant::now();
            let r = mining_run(seed, source, hp, sc).unwrap();
            row.push((r, t.elapsed().as_secs_f64()));
        }
        let mean = row.iter().map(|(r, _)| r).sum::<f64>() / row.len() as f64;
        let secs = row.iter().map(|(_, s)| s).sum::<f64>();
        println!(
            "{source:?}: mean {mean:.4}  per-seed {:?}  ({secs:.1}s)",
            row.iter().map(|(r, _)| (r * 1e4).round() / 1e4).collect::<Vec<_>>()
        );
        means.insert(format!("{source:?}"), mean);
    }
    let g = |a: &str, b: &str| means[a] - means[b];
    println!(
        "  (a) online-random: {:+.4}  (b) nci-random: {:+.4}  (c) mixed-offline: {:+.4}  mixed-random: {:+.4}",
        g("OnlineHard", "Random"),
        g("NonClickImpressions", "Random"),
        g("Mixed", "OfflineHard"),
        g("Mixed", "Random"),
    );
}

fn margin_table(hp: &Hyperparams, sc: &SynthConfig) {
    println!("# margins at epochs {} lr {}", hp.epochs, hp.lr);
    for seed in 0..2u64 {
        let mut row = Vec::new();
        for margin in [0.05, 0.1, 0.2, 0.4] {
            let hp = Hyperparams { margin, ..hp.clone() };
            let r = mining_run(seed, NegativeSource::Random, &hp, sc).unwrap();
            row.push((margin, (r * 1e4).round() / 1e4));
        }
        let spread = row.iter().map(|(_, r)| *r).fold(f64::MIN, f64::max)
            - row.iter().map(|(_, r)| *r).fold(f64::MAX, f64::min);
        println!("seed {seed}: {row:?} spread {spread:.4}");
    }
}

fn anisotropic_corpus(n: usize, dim: usize, seed: u64, decay: f64) -> Vec<Vec<f64>> {
    // Eigenvalue decay makes a handful of directions carry most variance,
    // so short PQ codes lose real accuracy and rotations help.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scales: Vec<f64> = (0..dim).map(|i| (-decay * i as f64).exp()).collect();
    // A fixed random rotation tilts the principal axes off the PQ
    // subspace boundaries, the regime OPQ corrects.
    let mut basis: Vec<Vec<f64>> = (0..dim)
        .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    for i in 0..dim {
        for j in 0..i {
            let dot: f64 = (0..dim).map(|k| basis[i][k] * basis[j][k]).sum();
            for k in 0..dim {
                let v = basis[j][k];
                basis[i][k] -= dot * v;
            }
        }
        let norm: f64 = basis[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        basis[i].iter_mut().for_each(|x| *x /= norm);
    }
    (0..n)
        .map(|_| {
            let coeffs: Vec<f64> = scales
                .iter()
                .map(|s| s * rng.sample::<f64, _>(StandardNormal))
                .collect();
            (0..dim)
                .map(|k| (0..dim).map(|a| coeffs[a] * basis[a][k]).sum())
                .collect()
        })
        .collect()
}

fn sweep_table(n: usize, dim: usize, queries: usize, decay: f64) {
    let t = std::time::Instant::now();
    let vectors = anisotropic_corpus(n + queries, dim, 7, decay);
    let index = Index::new();
    for (i, v) in vectors[..n].iter().enumerate() {
        let doc = Document::new(format!("d{i:05}"))
            .with_embedding("v", Vector32::new(v.iter().map(|&x| x as f32).collect()).unwrap());
        index.add_document(doc).unwrap();
    }
    let snapshot = index.snapshot();
    let eval_queries: Vec<(Vector64, BTreeSet<String>)> = vectors[n..]
        .iter()
        .map(|v| {
            let q = DenseVector::new(v.clone()).unwrap();
            let top = embr_model::eval::exact_knn(&snapshot, "v", &q, 10).unwrap();
            let targets: BTreeSet<String> = top.into_iter().map(|(id, _)| id).collect();
            (q, targets)
        })
        .collect();
    println!("# sweep corpus built in {:.1}s", t.elapsed().as_secs_f64());

    let grid = SweepGrid {
        num_clusters: vec![64],
        nprobe: vec![4, 8],
        pq_bytes: vec![4, 8, 16],
        transforms: vec![
            embr_core::TransformSpec::None,
            embr_core::TransformSpec::Opq { outer_iters: 8 },
        ],
        seed: 7,
    };
    let t = std::time::Instant::now();
    let (points, _) = run_sweep(&index, "v", &eval_queries, &grid, TimingMode::Off).unwrap();
    println!("# sweep ran in {:.1}s", t.elapsed().as_secs_f64());
    for p in &points {
        println!(
            "nc {} np {:>2} pq {:>2} {:<6} 1r@10 {:.4} r@10 {:.4} scanned {:>7.1}",
            p.num_clusters, p.nprobe, p.pq_bytes, p.transform, p.one_recall_at_10,
            p.recall_at_10, p.mean_scanned_documents
        );
    }
}

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "mining".to_string());
    let sc = SynthConfig::default();
    match mode.as_str() {
        "mining" => {
            for (epochs, lr) in [(2usize, 0.1f64), (4, 0.1), (4, 0.3)] {
                let hp = Hyperparams {
                    epochs,
                    lr,
                    batch_size: 32,
                    margin: 0.2,
                    seed: 0,
                };
                mining_table(&hp, &sc);
            }
        }
        "margin" => {
            let hp = Hyperparams { epochs: 4, lr: 0.1, batch_size: 32, margin: 0.2, seed: 0 };
            margin_table(&hp, &sc);
        }
        "sweep" => {
            let decay: f64 = std::env::args()
                .nth(2)
                .map(|s| s.parse().unwrap())
                .unwrap_or(0.25);
            sweep_table(10_000, 32, 400, decay)
        }
        other => eprintln!("unknown mode {other:?}"),
    }
}
