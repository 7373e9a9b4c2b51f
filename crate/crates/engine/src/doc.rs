//! Documents as bags of namespaced terms with optional payloads, plus the
//! JSONL interchange format used for corpus files.

use crate::EngineError;
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use embr_core::Vector32;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// A namespaced term. Orders by namespace, then value, which fixes posting
/// list key order everywhere.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Term {
    pub namespace: String,
    pub value: String,
}

impl Term {
    pub fn new(namespace: impl Into<String>, value: impl Into<String>) -> Self {
        Term { namespace: namespace.into(), value: value.into() }
    }

    /// Splits at the first ':' so values may themselves contain colons.
    pub fn parse(text: &str) -> Result<Self, EngineError> {
        let Some(colon) = text.find(':') else {
            return Err(EngineError::InvalidDocument(format!(
                "term {text:?} is missing the ':' between namespace and value"
            )));
        };
        let term = Term::new(&text[..colon], &text[colon + 1..]);
        term.validate()?;
        Ok(term)
    }

    fn validate(&self) -> Result<(), EngineError> {
        if self.namespace.is_empty() || self.value.is_empty() {
            return Err(EngineError::InvalidDocument(format!(
                "term {self} has an empty namespace or value"
            )));
        }
        for part in [&self.namespace, &self.value] {
            if part.chars().any(|c| c.is_whitespace() || c == '(' || c == ')') {
                return Err(EngineError::InvalidDocument(format!(
                    "term {self} contains whitespace or parentheses and could never be queried"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.namespace, self.value)
    }
}

/// Raw model-input features carried alongside a document or query.
///
/// Categorical channels hold (feature id, weight) pairs; multi-hot channels
/// may repeat an id, in which case weights add during encoding.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureRecord {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub text_fields: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub categorical: BTreeMap<String, Vec<(u32, f64)>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub dense: BTreeMap<String, Vec<f64>>,
}

impl FeatureRecord {
    /// Rejects non-finite weights or dense values.
    pub fn validate(&self) -> Result<(), EngineError> {
        for (channel, pairs) in &self.categorical {
            if let Some((id, w)) = pairs.iter().find(|(_, w)| !w.is_finite()) {
                return Err(EngineError::InvalidDocument(format!(
                    "categorical channel {channel:?} has non-finite weight {w} for id {id}"
                )));
            }
        }
        for (channel, values) in &self.dense {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(EngineError::InvalidDocument(format!(
                    "dense channel {channel:?} contains a non-finite value"
                )));
            }
        }
        Ok(())
    }
}

/// An indexed document: unique id, terms with at most one payload each,
/// named embeddings, and the raw features the embeddings came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub doc_id: String,
    pub terms: BTreeMap<Term, Option<Vec<u8>>>,
    pub embeddings: BTreeMap<String, Vector32>,
    pub features: FeatureRecord,
}

impl Document {
    pub fn new(doc_id: impl Into<String>) -> Self {
        Document {
            doc_id: doc_id.into(),
            terms: BTreeMap::new(),
            embeddings: BTreeMap::new(),
            features: FeatureRecord::default(),
        }
    }

    pub fn with_term(mut self, namespace: &str, value: &str) -> Self {
        self.terms.insert(Term::new(namespace, value), None);
        self
    }

    pub fn with_embedding(mut self, key: &str, vector: Vector32) -> Self {
        self.embeddings.insert(key.to_string(), vector);
        self
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.doc_id.is_empty() {
            return Err(EngineError::InvalidDocument("doc_id is empty".into()));
        }
        for term in self.terms.keys() {
            term.validate()?;
        }
        self.features.validate()
    }
}

/// One corpus JSONL line. Terms are `namespace:value` strings; payloads are
/// base64 keyed by the same string; embeddings are plain float arrays.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub terms: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub payloads: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub embeddings: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "feature_record_is_empty")]
    pub features: FeatureRecord,
}

fn feature_record_is_empty(f: &FeatureRecord) -> bool {
    f.text_fields.is_empty() && f.categorical.is_empty() && f.dense.is_empty()
}

impl CorpusRecord {
    /// Parses terms, attaches payloads, and converts embeddings to f32
    /// storage. Duplicate term strings collapse (bag-of-terms set
    /// semantics); a payload keyed by a term absent from `terms` is an
    /// error.
    pub fn into_document(self) -> Result<Document, EngineError> {
        let mut terms: BTreeMap<Term, Option<Vec<u8>>> = BTreeMap::new();
        for raw in &self.terms {
            terms.insert(Term::parse(raw)?, None);
        }
        for (raw, encoded) in &self.payloads {
            let term = Term::parse(raw)?;
            let Some(slot) = terms.get_mut(&term) else {
                return Err(EngineError::InvalidDocument(format!(
                    "payload references term {raw:?} not present in the terms list"
                )));
            };
            let bytes = BASE64.decode(encoded).map_err(|e| {
                EngineError::InvalidDocument(format!("payload for {raw:?} is not valid base64: {e}"))
            })?;
            *slot = Some(bytes);
        }
        let mut embeddings = BTreeMap::new();
        for (key, values) in self.embeddings {
            let vector = Vector32::from_f64(&values).map_err(|e| {
                EngineError::InvalidDocument(format!("embedding {key:?}: {e}"))
            })?;
            embeddings.insert(key, vector);
        }
        let doc = Document { doc_id: self.id, terms, embeddings, features: self.features };
        doc.validate()?;
        Ok(doc)
    }

    pub fn from_document(doc: &Document) -> Self {
        let mut terms = Vec::with_capacity(doc.terms.len());
        let mut payloads = BTreeMap::new();
        for (term, payload) in &doc.terms {
            let text = term.to_string();
            if let Some(bytes) = payload {
                payloads.insert(text.clone(), BASE64.encode(bytes));
            }
            terms.push(text);
        }
        let embeddings = doc
            .embeddings
            .iter()
            .map(|(k, v)| (k.clone(), v.components().iter().map(|&c| c as f64).collect()))
            .collect();
        CorpusRecord {
            id: doc.doc_id.clone(),
            terms,
            payloads,
            embeddings,
            features: doc.features.clone(),
        }
    }
}

/// Reads a corpus JSONL file; parse failures report the 1-based line number.
pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>, EngineError> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(&line).map_err(|e| {
            EngineError::Format {
                file: path.display().to_string(),
                message: format!("line {}: {e}", lineno + 1),
            }
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Writes corpus records as one JSON object per line.
pub fn write_corpus(path: &Path, records: &[CorpusRecord]) -> Result<(), EngineError> {
    let file = std::fs::File::create(path)?;
    let mut writer = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).map_err(|e| EngineError::Format {
            file: path.display().to_string(),
            message: e.to_string(),
        })?;
        writeln!(writer, "{line}")?;
    }
    writer.flush()?;
    Ok(())
}
