//! Inverted index with copy-on-write snapshots.
//!
//! A single writer mutates the master state under a lock; readers take
//! [`Index::snapshot`], an immutable [`IndexSnapshot`] behind an `Arc`.
//! Posting lists and segments are shared between master and outstanding
//! snapshots until a mutation touches them (`Arc::make_mut`), so searches
//! running against generation g never observe generation g+1.
//!
//! Removal tombstones the document: its ordinal slot empties, posting
//! entries stay behind and are skipped as dead during evaluation. An
//! explicit [`Index::compact`] rewrites everything densely. Quantized codes
//! survive compaction unchanged because ordinal remapping is monotone and
//! codes do not depend on ordinals.

use crate::doc::{Document, Term};
use crate::querylang::QueryNode;
use crate::segment::{build_ann_segment, AnnSegment};
use crate::EngineError;
use embr_core::config::AnnConfig;
use embr_core::l2_normalize;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, RwLock};

/// One posting: the ordinal of a document carrying the term, plus that
/// document's payload for the term.
#[derive(Debug, Clone, PartialEq)]
pub struct PostingEntry {
    pub doc_ordinal: u32,
    pub payload: Option<Vec<u8>>,
}

/// All documents carrying one term, sorted strictly ascending by ordinal.
/// Entries may reference tombstoned ordinals until the next compact.
#[derive(Debug, Clone, PartialEq)]
pub struct PostingList {
    pub term: Term,
    pub entries: Vec<PostingEntry>,
}

/// Immutable view of the index at one generation.
#[derive(Debug, Clone)]
pub struct IndexSnapshot {
    pub(crate) documents: Vec<Option<Arc<Document>>>,
    pub(crate) doc_ids: BTreeMap<String, u32>,
    pub(crate) postings: BTreeMap<Term, Arc<PostingList>>,
    pub(crate) ann: BTreeMap<String, Arc<AnnSegment>>,
    pub(crate) embedding_dims: BTreeMap<String, usize>,
    pub(crate) generation: u64,
}

impl IndexSnapshot {
    pub(crate) fn empty() -> Self {
        IndexSnapshot {
            documents: Vec::new(),
            doc_ids: BTreeMap::new(),
            postings: BTreeMap::new(),
            ann: BTreeMap::new(),
            embedding_dims: BTreeMap::new(),
            generation: 0,
        }
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Number of ordinal slots, tombstones included.
    pub fn num_ordinals(&self) -> usize {
        self.documents.len()
    }

    pub fn live_count(&self) -> usize {
        self.documents.iter().filter(|d| d.is_some()).count()
    }

    pub fn document(&self, ordinal: u32) -> Option<&Arc<Document>> {
        self.documents.get(ordinal as usize).and_then(|slot| slot.as_ref())
    }

    pub fn ordinal_of(&self, doc_id: &str) -> Option<u32> {
        self.doc_ids.get(doc_id).copied()
    }

    pub fn doc_id_of(&self, ordinal: u32) -> Option<&str> {
        self.document(ordinal).map(|d| d.doc_id.as_str())
    }

    pub fn live_documents(&self) -> impl Iterator<Item = (u32, &Arc<Document>)> {
        self.documents
            .iter()
            .enumerate()
            .filter_map(|(ord, slot)| slot.as_ref().map(|d| (ord as u32, d)))
    }

    pub fn posting(&self, term: &Term) -> Option<&PostingList> {
        self.postings.get(term).map(|p| p.as_ref())
    }

    pub fn postings(&self) -> impl Iterator<Item = &PostingList> {
        self.postings.values().map(|p| p.as_ref())
    }

    pub fn ann_segment(&self, key: &str) -> Option<&AnnSegment> {
        self.ann.get(key).map(|s| s.as_ref())
    }

    pub fn ann_keys(&self) -> BTreeSet<String> {
        self.ann.keys().cloned().collect()
    }

    /// Input dimension registered per embedding key; fixed by the first
    /// document that carries the key.
    pub fn embedding_dims(&self) -> &BTreeMap<String, usize> {
        &self.embedding_dims
    }

    /// Live ordinals carrying `term`, sorted ascending.
    pub(crate) fn term_ordinals(&self, term: &Term) -> Vec<u32> {
        match self.postings.get(term) {
            None => Vec::new(),
            Some(list) => list
                .entries
                .iter()
                .filter(|e| self.document(e.doc_ordinal).is_some())
                .map(|e| e.doc_ordinal)
                .collect(),
        }
    }
}

struct Inner {
    master: IndexSnapshot,
    // Cached Arc of the last published snapshot; dropped on any mutation so
    // the next reader sees the new generation.
    published: Option<Arc<IndexSnapshot>>,
}

/// Single-writer, many-reader index handle.
pub struct Index {
    inner: RwLock<Inner>,
}

impl Default for Index {
    fn default() -> Self {
        Self::new()
    }
}

impl Index {
    pub fn new() -> Self {
        Index { inner: RwLock::new(Inner { master: IndexSnapshot::empty(), published: None }) }
    }

    /// Wraps a snapshot loaded from disk into a mutable handle.
    pub fn from_snapshot(snapshot: IndexSnapshot) -> Self {
        Index { inner: RwLock::new(Inner { master: snapshot, published: None }) }
    }

    /// Immutable view of the current generation. Cheap after the first call
    /// per generation: the clone shares posting lists and segments.
    pub fn snapshot(&self) -> Arc<IndexSnapshot> {
        let inner = self.inner.read().expect("index lock poisoned");
        if let Some(snap) = &inner.published {
            return Arc::clone(snap);
        }
        drop(inner);
        let mut inner = self.inner.write().expect("index lock poisoned");
        if inner.published.is_none() {
            inner.published = Some(Arc::new(inner.master.clone()));
        }
        Arc::clone(inner.published.as_ref().expect("just published"))
    }

    /// Adds a document: terms into posting lists, embeddings normalized to
    /// unit length and, where a segment exists for the key, encoded and
    /// appended so the document is nearest-neighbor searchable immediately.
    pub fn add_document(&self, mut doc: Document) -> Result<u64, EngineError> {
        doc.validate()?;
        let mut inner = self.inner.write().expect("index lock poisoned");
        let master = &mut inner.master;
        if master.doc_ids.contains_key(&doc.doc_id) {
            return Err(EngineError::DuplicateDocId(doc.doc_id));
        }
        for (key, vector) in &doc.embeddings {
            if let Some(&expected) = master.embedding_dims.get(key) {
                if vector.dim() != expected {
                    return Err(EngineError::EmbeddingDimMismatch {
                        key: key.clone(),
                        expected,
                        got: vector.dim(),
                    });
                }
            }
        }
        // Embeddings are stored unit-norm so every distance path (flat scan,
        // residual coding, exact oracle) reads the same bits.
        for (key, vector) in &mut doc.embeddings {
            *vector = l2_normalize(vector).map_err(|e| {
                EngineError::InvalidDocument(format!("embedding {key:?}: {e}"))
            })?;
        }
        // Encode against existing segments before mutating anything, so a
        // failure leaves the index untouched.
        let mut encoded: Vec<(String, usize, Vec<u8>)> = Vec::new();
        for (key, vector) in &doc.embeddings {
            if let Some(segment) = master.ann.get(key) {
                let (cluster, code) = segment.encode(&vector.to_f64_vec())?;
                encoded.push((key.clone(), cluster, code));
            }
        }

        let ordinal = master.documents.len() as u32;
        for (key, vector) in &doc.embeddings {
            master.embedding_dims.entry(key.clone()).or_insert(vector.dim());
        }
        for (term, payload) in &doc.terms {
            let list = master
                .postings
                .entry(term.clone())
                .or_insert_with(|| Arc::new(PostingList { term: term.clone(), entries: Vec::new() }));
            let list = Arc::make_mut(list);
            debug_assert!(list.entries.last().is_none_or(|e| e.doc_ordinal < ordinal));
            list.entries.push(PostingEntry { doc_ordinal: ordinal, payload: payload.clone() });
        }
        for (key, cluster, code) in encoded {
            let segment = master.ann.get_mut(&key).expect("segment existed during encode");
            Arc::make_mut(segment).push(cluster, ordinal, code);
        }
        master.doc_ids.insert(doc.doc_id.clone(), ordinal);
        master.documents.push(Some(Arc::new(doc)));
        master.generation += 1;
        inner.published = None;
        Ok(inner.master.generation)
    }

    /// Tombstones a document. Posting and cluster entries linger until
    /// [`Index::compact`] but no longer match queries.
    pub fn remove_document(&self, doc_id: &str) -> Result<u64, EngineError> {
        let mut inner = self.inner.write().expect("index lock poisoned");
        let master = &mut inner.master;
        let Some(ordinal) = master.doc_ids.remove(doc_id) else {
            return Err(EngineError::UnknownDocId(doc_id.to_string()));
        };
        master.documents[ordinal as usize] = None;
        master.generation += 1;
        inner.published = None;
        Ok(inner.master.generation)
    }

    /// Trains coarse and product quantizers over every live document that
    /// carries `key` and replaces the segment for that key.
    pub fn build_segment(&self, key: &str, config: &AnnConfig) -> Result<u64, EngineError> {
        let mut inner = self.inner.write().expect("index lock poisoned");
        let master = &mut inner.master;
        let Some(&dim) = master.embedding_dims.get(key) else {
            return Err(EngineError::UnknownEmbeddingKey(key.to_string()));
        };
        let vectors: Vec<(u32, Vec<f64>)> = master
            .documents
            .iter()
            .enumerate()
            .filter_map(|(ord, slot)| {
                let doc = slot.as_ref()?;
                let v = doc.embeddings.get(key)?;
                Some((ord as u32, v.to_f64_vec()))
            })
            .collect();
        let segment = build_ann_segment(key, dim, &vectors, config)?;
        master.ann.insert(key.to_string(), Arc::new(segment));
        master.generation += 1;
        inner.published = None;
        Ok(inner.master.generation)
    }

    /// Drops tombstones: documents are renumbered densely (order preserved),
    /// posting lists and cluster postings are rewritten with remapped
    /// ordinals, and empty posting lists disappear. Codes are kept as-is.
    pub fn compact(&self) -> Result<u64, EngineError> {
        let mut inner = self.inner.write().expect("index lock poisoned");
        let mut compacted = compacted_view(&inner.master);
        compacted.generation = inner.master.generation + 1;
        inner.master = compacted;
        inner.published = None;
        Ok(inner.master.generation)
    }
}

/// Tombstone-free copy of a snapshot with densely renumbered ordinals.
/// Remapping is monotone, so sort orders survive and codes stay valid.
/// The generation is carried over unchanged.
pub(crate) fn compacted_view(snapshot: &IndexSnapshot) -> IndexSnapshot {
    let mut remap: Vec<Option<u32>> = vec![None; snapshot.documents.len()];
    let mut documents: Vec<Option<Arc<Document>>> = Vec::with_capacity(snapshot.doc_ids.len());
    let mut doc_ids = BTreeMap::new();
    for (old, slot) in snapshot.documents.iter().enumerate() {
        if let Some(doc) = slot {
            let new = documents.len() as u32;
            remap[old] = Some(new);
            doc_ids.insert(doc.doc_id.clone(), new);
            documents.push(Some(Arc::clone(doc)));
        }
    }
    let mut postings = BTreeMap::new();
    for (term, list) in &snapshot.postings {
        let entries: Vec<PostingEntry> = list
            .entries
            .iter()
            .filter_map(|e| {
                remap[e.doc_ordinal as usize].map(|new| PostingEntry {
                    doc_ordinal: new,
                    payload: e.payload.clone(),
                })
            })
            .collect();
        if !entries.is_empty() {
            postings.insert(term.clone(), Arc::new(PostingList { term: term.clone(), entries }));
        }
    }
    let mut ann = BTreeMap::new();
    for (key, segment) in &snapshot.ann {
        ann.insert(key.clone(), Arc::new(segment.remap(&remap)));
    }
    IndexSnapshot {
        documents,
        doc_ids,
        postings,
        ann,
        embedding_dims: snapshot.embedding_dims.clone(),
        generation: snapshot.generation,
    }
}

/// Tests one document's term set against a Boolean query, without an index.
/// Used for ingest-time filtering. `(nn)` nodes are rejected.
pub fn matches_document(q: &QueryNode, doc: &Document) -> Result<bool, EngineError> {
    match q {
        QueryNode::And(children) => {
            for child in children {
                if !matches_document(child, doc)? {
                    return Ok(false);
                }
            }
            Ok(true)
        }
        QueryNode::Or(children) => {
            for child in children {
                if matches_document(child, doc)? {
                    return Ok(true);
                }
            }
            Ok(false)
        }
        QueryNode::Term { namespace, value } => Ok(doc
            .terms
            .contains_key(&Term::new(namespace.clone(), value.clone()))),
        QueryNode::Nn { .. } => Err(EngineError::NnNotAllowed),
    }
}

/// Exact Boolean set evaluation: Term is posting membership, And intersects,
/// Or unions. Unknown terms match nothing. `(nn)` nodes are rejected; the
/// search entry point handles those by rewriting.
pub fn evaluate_boolean(
    q: &QueryNode,
    snapshot: &IndexSnapshot,
) -> Result<BTreeSet<String>, EngineError> {
    let ordinals = eval_ordinals(q, snapshot)?;
    Ok(ordinals
        .into_iter()
        .filter_map(|ord| snapshot.doc_id_of(ord).map(str::to_string))
        .collect())
}

/// Evaluates to sorted live ordinals.
pub(crate) fn eval_ordinals(
    q: &QueryNode,
    snapshot: &IndexSnapshot,
) -> Result<Vec<u32>, EngineError> {
    match q {
        QueryNode::Term { namespace, value } => {
            Ok(snapshot.term_ordinals(&Term::new(namespace.clone(), value.clone())))
        }
        QueryNode::And(children) => {
            let mut lists = children
                .iter()
                .map(|c| eval_ordinals(c, snapshot))
                .collect::<Result<Vec<_>, _>>()?;
            lists.sort_by_key(Vec::len);
            let mut iter = lists.into_iter();
            let mut acc = iter.next().unwrap_or_default();
            for other in iter {
                acc = intersect_sorted(&acc, &other);
                if acc.is_empty() {
                    break;
                }
            }
            Ok(acc)
        }
        QueryNode::Or(children) => {
            let mut all = Vec::new();
            for c in children {
                all.extend(eval_ordinals(c, snapshot)?);
            }
            all.sort_unstable();
            all.dedup();
            Ok(all)
        }
        QueryNode::Nn { .. } => Err(EngineError::NnNotAllowed),
    }
}

/// Intersection of two ascending lists; iterates the shorter list and
/// gallops through the longer one.
pub(crate) fn intersect_sorted(shorter: &[u32], longer: &[u32]) -> Vec<u32> {
    let (a, b) = if shorter.len() <= longer.len() { (shorter, longer) } else { (longer, shorter) };
    let mut out = Vec::with_capacity(a.len().min(b.len()));
    let mut lo = 0usize;
    for &x in a {
        if lo >= b.len() {
            break;
        }
        // Exponential probe to bracket the first element >= x, then binary
        // search inside the bracket.
        let mut bound = 1usize;
        while lo + bound < b.len() && b[lo + bound] < x {
            bound <<= 1;
        }
        let window_end = (lo + bound + 1).min(b.len());
        let idx = lo + b[lo..window_end].partition_point(|&y| y < x);
        if idx < b.len() && b[idx] == x {
            out.push(x);
            lo = idx + 1;
        } else {
            lo = idx;
        }
    }
    out
}
