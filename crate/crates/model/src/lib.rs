//! Two-tower embedding models for retrieval: text feature extraction,
//! encoder networks with triplet-loss training, negative and positive
//! mining strategies, model ensembles, and an evaluation harness for
//! recall metrics and index-parameter sweeps.
//!
//! Everything is deterministic given a seed: training, mining, synthetic
//! data generation, and sweeps all reproduce bit-identical outputs.

pub mod checkpoint;
pub mod encoder;
pub mod ensemble;
pub mod eval;
pub mod features;
pub mod loss;
pub mod mining;
pub mod synth;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use encoder::{Activation, ChannelConfig, DenseLayer, EncoderConfig, EncoderModel, TwoTower};
pub use ensemble::{cascade_search, Ensemble, EnsembleMember};
pub use eval::{
    ensemble_weight_grid, exact_knn, one_recall_at_10, read_eval_sessions, recall_at_k, run_sweep,
    write_eval_sessions, EvalSession, SweepGrid, SweepPoint, TimingMode,
};
pub use features::{extract_text_features, CHAR_TRIGRAMS_CHANNEL, WORD_NGRAMS_CHANNEL};
pub use loss::{triplet_loss, Triplet, TripletBatch};
pub use mining::{
    mine_hard_positives, mine_offline_hard_negatives, mine_online_hard_negatives,
    mine_random_negatives, read_session_log, write_session_log, MiningConfig, NegativeSource,
    PositiveSource, SessionRecord,
};
pub use synth::{generate, FuzzyScenario, SynthConfig, SynthData};
pub use train::{
    read_train_examples, train, write_train_examples, Hyperparams, LabelSource, TrainExample,
    TrainReport,
};

use embr_core::VectorError;

/// Unified error type for model construction, training, and evaluation.
#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("unknown channel {0:?}")]
    UnknownChannel(String),
    #[error("channel {channel:?}: {message}")]
    Channel { channel: String, message: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("training diverged: loss became non-finite at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("degenerate embedding: pre-normalization norm is zero")]
    DegenerateEmbedding,
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error(transparent)]
    Engine(#[from] embr_engine::EngineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{file}: {message}")]
    Format { file: String, message: String },
    #[error("{file}: checksum mismatch, file is corrupt")]
    Checksum { file: String },
    #[error("{file}: format version {got}, this build reads version {expected}")]
    FormatVersion { file: String, got: u32, expected: u32 },
}
