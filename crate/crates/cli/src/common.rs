//! Shared plumbing: exit-code classification, the key=value config file,
//! and loaders used by more than one subcommand.

use embr_core::config::ConfigError;
use embr_core::TransformSpec;
use embr_engine::{CorpusRecord, EngineError, FeatureRecord};
use embr_model::encoder::{EncoderConfig, TwoTower};
use embr_model::ensemble::{member_embedding_key, EnsembleMember};
use embr_model::ModelError;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Iteration budget when `--transform opq` is given without a count.
pub const DEFAULT_OPQ_ITERS: usize = 8;

/// Errors split by exit code: usage and validation problems exit 2,
/// runtime failures (I/O, corruption, divergence) exit 3.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Io(_) | EngineError::Checksum { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(_)
            | ModelError::Checksum { .. }
            | ModelError::Divergence { .. }
            | ModelError::DegenerateEmbedding => CliError::Runtime(e.to_string()),
            ModelError::Engine(inner) => inner.into(),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Defaults from a `key=value` file; explicit flags take precedence.
/// Keys use the long option names of the subcommand being run, and keys
/// meant for other subcommands are ignored.
#[derive(Debug)]
pub struct FileConfig {
    entries: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("config file {}: {e}", path.display())))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    usage(format!(
                        "config file {} line {}: expected key=value",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                entries.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(FileConfig { entries })
    }

    /// Flag if given, else the config-file entry, else the default.
    pub fn resolve<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.resolve_opt(flag, key)?.unwrap_or(default))
    }

    pub fn resolve_opt<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.entries.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| usage(format!("config key {key}={raw}: {e}"))),
        }
    }
}

/// Encoder layout sidecar written by `gen` and consumed by `train`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub query: EncoderConfig,
    pub doc: EncoderConfig,
    pub shared_channels: std::collections::BTreeSet<String>,
}

/// Ensemble description: checkpoint paths plus combination mode. Member
/// ids are the checkpoint file stems.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpecFile {
    pub mode: String,
    pub models: Vec<PathBuf>,
    #[serde(default)]
    pub weights: Vec<f64>,
    #[serde(default)]
    pub rerank_depth: Option<usize>,
}

pub struct LoadedEnsemble {
    pub mode: EnsembleMode,
    pub members: Vec<EnsembleMember>,
}

pub enum EnsembleMode {
    WeightedConcat { weights: Vec<f64> },
    Cascade { rerank_depth: usize },
}

/// Default model id: the checkpoint's file stem.
pub fn checkpoint_id(path: &Path) -> Result<String, CliError> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .ok_or_else(|| usage(format!("checkpoint {} has no usable file stem", path.display())))
}

pub fn load_ensemble_spec(path: &Path) -> Result<LoadedEnsemble, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("ensemble spec {}: {e}", path.display())))?;
    let spec: EnsembleSpecFile = serde_json::from_str(&text)
        .map_err(|e| usage(format!("ensemble spec {}: {e}", path.display())))?;

    let mut members = Vec::with_capacity(spec.models.len());
    for model_path in &spec.models {
        let id = checkpoint_id(model_path)?;
        let towers = embr_model::load_checkpoint(model_path).map_err(CliError::from)?;
        members.push(EnsembleMember { id, towers });
    }

    let mode = match spec.mode.as_str() {
        "weighted_concat" => {
            if spec.rerank_depth.is_some() {
                return Err(usage("rerank_depth only applies to cascade mode"));
            }
            EnsembleMode::WeightedConcat { weights: spec.weights }
        }
        "cascade" => {
            if !spec.weights.is_empty() {
                return Err(usage("weights only apply to weighted_concat mode"));
            }
            if members.len() != 2 {
                return Err(usage("cascade mode takes exactly two checkpoints"));
            }
            let depth = spec
                .rerank_depth
                .ok_or_else(|| usage("cascade mode requires rerank_depth"))?;
            if depth == 0 {
                return Err(usage("rerank_depth must be at least 1"));
            }
            EnsembleMode::Cascade { rerank_depth: depth }
        }
        other => {
            return Err(usage(format!(
                "unknown ensemble mode {other:?}: expected weighted_concat or cascade"
            )))
        }
    };
    Ok(LoadedEnsemble { mode, members })
}

pub fn member_key(member: &EnsembleMember) -> String {
    member_embedding_key(&member.id)
}

pub fn read_corpus_records(path: &Path) -> Result<Vec<CorpusRecord>, CliError> {
    embr_engine::read_corpus(path).map_err(CliError::from)
}

/// Corpus features keyed by doc id, for training and evaluation.
pub fn corpus_feature_map(
    records: &[CorpusRecord],
) -> Result<BTreeMap<String, FeatureRecord>, CliError> {
    let mut map = BTreeMap::new();
    for record in records {
        if map.insert(record.id.clone(), record.features.clone()).is_some() {
            return Err(usage(format!("duplicate doc id {:?} in corpus", record.id)));
        }
    }
    Ok(map)
}

pub fn load_model(path: &Path) -> Result<TwoTower, CliError> {
    embr_model::load_checkpoint(path).map_err(CliError::from)
}

pub fn load_encoder_spec(path: &Path) -> Result<EncoderSpec, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("encoder spec {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| usage(format!("encoder spec {}: {e}", path.display())))
}

/// A query-side feature record from `--record <file>` or `--text <s>`.
pub fn load_query_record(
    record: Option<&Path>,
    text: Option<&str>,
) -> Result<Option<FeatureRecord>, CliError> {
    match (record, text) {
        (Some(_), Some(_)) => Err(usage("give either --record or --text, not both")),
        (None, None) => Ok(None),
        (Some(path), None) => {
            let raw = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("query record {}: {e}", path.display())))?;
            let rec: FeatureRecord = serde_json::from_str(&raw)
                .map_err(|e| usage(format!("query record {}: {e}", path.display())))?;
            rec.validate().map_err(CliError::from)?;
            Ok(Some(rec))
        }
        (None, Some(text)) => {
            let rec = FeatureRecord {
                text_fields: BTreeMap::from([("query".to_string(), text.to_string())]),
                categorical: embr_model::extract_text_features(text),
                dense: BTreeMap::new(),
            };
            Ok(Some(rec))
        }
    }
}

/// `none`, `pca:<out_dim>`, `opq`, or `opq:<outer_iters>`.
pub fn parse_transform(s: &str) -> Result<TransformSpec, CliError> {
    let s = s.trim();
    if s == "none" {
        return Ok(TransformSpec::None);
    }
    if let Some(rest) = s.strip_prefix("pca:") {
        let out_dim = rest
            .parse()
            .map_err(|e| usage(format!("transform {s:?}: {e}")))?;
        return Ok(TransformSpec::Pca { out_dim });
    }
    if s == "opq" {
        return Ok(TransformSpec::Opq { outer_iters: DEFAULT_OPQ_ITERS });
    }
    if let Some(rest) = s.strip_prefix("opq:") {
        let outer_iters = rest
            .parse()
            .map_err(|e| usage(format!("transform {s:?}: {e}")))?;
        return Ok(TransformSpec::Opq { outer_iters });
    }
    Err(usage(format!(
        "transform {s:?}: expected none, pca:<out_dim>, or opq[:<outer_iters>]"
    )))
}

/// Comma-separated list, e.g. `--nprobe 1,4,16`.
pub fn parse_list<T>(s: &str, what: &str) -> Result<Vec<T>, CliError>
where
    T: FromStr,
    T::Err: Display,
{
    s.split(',')
        .map(|part| {
            part.trim()
                .parse()
                .map_err(|e| usage(format!("{what} {part:?}: {e}")))
        })
        .collect()
}

/// `lo:hi` fractions for the offline mining rank window.
pub fn parse_rank_window(s: &str) -> Result<(f64, f64), CliError> {
    let (lo, hi) = s
        .split_once(':')
        .ok_or_else(|| usage(format!("rank window {s:?}: expected lo:hi")))?;
    let lo = lo.trim().parse().map_err(|e| usage(format!("rank window {s:?}: {e}")))?;
    let hi = hi.trim().parse().map_err(|e| usage(format!("rank window {s:?}: {e}")))?;
    Ok((lo, hi))
}

/// One-line JSON on stdout: the machine-readable result of a subcommand.
pub fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("report serializes"));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transforms_parse_and_reject() {
        assert_eq!(parse_transform("none").unwrap(), TransformSpec::None);
        assert_eq!(parse_transform("pca:16").unwrap(), TransformSpec::Pca { out_dim: 16 });
        assert_eq!(
            parse_transform("opq").unwrap(),
            TransformSpec::Opq { outer_iters: DEFAULT_OPQ_ITERS }
        );
        assert_eq!(parse_transform("opq:3").unwrap(), TransformSpec::Opq { outer_iters: 3 });
        assert!(parse_transform("lda").is_err());
        assert!(parse_transform("pca:x").is_err());
    }

    #[test]
    fn config_file_fills_only_missing_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# comment\nepochs = 7\nlr=0.5\n").unwrap();
        let cfg = FileConfig::load(Some(&path)).unwrap();
        assert_eq!(cfg.resolve(Some(3usize), "epochs", 1).unwrap(), 3);
        assert_eq!(cfg.resolve(None::<usize>, "epochs", 1).unwrap(), 7);
        assert_eq!(cfg.resolve(None::<f64>, "lr", 0.1).unwrap(), 0.5);
        assert_eq!(cfg.resolve(None::<f64>, "margin", 0.25).unwrap(), 0.25);
    }

    #[test]
    fn malformed_config_lines_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "epochs\n").unwrap();
        let err = FileConfig::load(Some(&path)).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.message().contains("line 1"), "{}", err.message());
    }

    #[test]
    fn text_shorthand_extracts_features() {
        let rec = load_query_record(None, Some("kasie creations")).unwrap().unwrap();
        assert_eq!(rec.text_fields["query"], "kasie creations");
        assert!(rec.categorical.contains_key(embr_model::CHAR_TRIGRAMS_CHANNEL));
        assert!(load_query_record(None, None).unwrap().is_none());
    }
}
