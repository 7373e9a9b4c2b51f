//! Single-node hybrid retrieval engine: an inverted index over documents as
//! bags of namespaced terms, unified with embedding nearest-neighbor search
//! through an `(nn ...)` query operator.
//!
//! Embedding search lives inside the index: each document embedding is
//! coarse-quantized to a cluster id (a synthetic term) and a compact code (a
//! payload). An `(nn)` clause is rewritten into scans of the clusters
//! nearest the query, verified against the radius or top-K bound using the
//! payload codes. Radius-mode clauses compose with Boolean operators as
//! ordinary predicates.

pub mod annsearch;
pub mod doc;
pub mod index;
pub mod persist;
pub mod querylang;
pub mod segment;

pub use annsearch::{rewrite_nn, search, MatchTrace, NnPlan, SearchOutcome, SearchResult};
pub use doc::{read_corpus, write_corpus, CorpusRecord, Document, FeatureRecord, Term};
pub use index::{
    evaluate_boolean, matches_document, Index, IndexSnapshot, PostingEntry, PostingList,
};
pub use persist::{load_index, save_index};
pub use querylang::{
    parse_query, print_query, validate_query, Diagnostic, NnMode, QueryNode,
};
pub use segment::{build_ann_segment, AnnSegment, ClusterPosting, SegmentEntry};

use embr_core::{config::ConfigError, QuantError, VectorError};

/// Unified error type for index, query, and persistence operations.
#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("query syntax error at byte {offset}: {message}")]
    QuerySyntax { offset: usize, message: String },
    #[error("invalid query: {}", format_diagnostics(.0))]
    InvalidQuery(Vec<Diagnostic>),
    #[error("nn operator not allowed in pure Boolean evaluation")]
    NnNotAllowed,
    #[error("duplicate doc_id {0:?}")]
    DuplicateDocId(String),
    #[error("unknown doc_id {0:?}")]
    UnknownDocId(String),
    #[error("invalid document: {0}")]
    InvalidDocument(String),
    #[error("unknown embedding key {0:?}")]
    UnknownEmbeddingKey(String),
    #[error("embedding {key:?} has dimension {got}, index expects {expected}")]
    EmbeddingDimMismatch { key: String, expected: usize, got: usize },
    #[error("segment for {key:?} needs at least {needed} documents with that embedding, found {got}")]
    TooFewVectors { key: String, needed: usize, got: usize },
    #[error("no embedding supplied for key {0:?} referenced by an nn clause")]
    MissingQueryEmbedding(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{file}: {message}")]
    Format { file: String, message: String },
    #[error("{file}: checksum mismatch, file is corrupt")]
    Checksum { file: String },
    #[error("{file}: format version {got}, this build reads version {expected}")]
    FormatVersion { file: String, got: u32, expected: u32 },
}

fn format_diagnostics(diags: &[Diagnostic]) -> String {
    diags
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
