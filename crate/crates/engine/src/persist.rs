//! On-disk index format.
//!
//! An index directory holds `manifest.json`, `docs.bin`, `postings.bin`,
//! and one `ann/<key>/` directory per embedding key containing
//! `quantizer.bin` and `segment.bin`. Binary files are little-endian with
//! an 8-byte magic, a u32 format version, and an FNV-1a 64-bit checksum
//! footer over everything before it. The manifest carries its checksum as
//! a JSON field computed with the field itself empty.
//!
//! Saving writes the compacted live view (tombstones dropped, ordinals
//! renumbered monotonically), which is search-equivalent to the source
//! snapshot. Loading verifies every checksum, every structural invariant,
//! and cross-checks postings against the documents before constructing a
//! snapshot, so a failed load leaves nothing behind.

use crate::doc::{Document, FeatureRecord, Term};
use crate::index::{compacted_view, IndexSnapshot, PostingEntry, PostingList};
use crate::segment::{AnnSegment, ClusterPosting, SegmentEntry};
use crate::EngineError;
use embr_core::config::AnnConfig;
use embr_core::{fnv1a64, CoarseQuantizer, DenseVector, ProductQuantizer, Transform, Vector32};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

const FORMAT_VERSION: u32 = 1;
const MAGIC_DOCS: &[u8; 8] = b"EMBRDOC1";
const MAGIC_POSTINGS: &[u8; 8] = b"EMBRPST1";
const MAGIC_QUANTIZER: &[u8; 8] = b"EMBRQNT1";
const MAGIC_SEGMENT: &[u8; 8] = b"EMBRSEG1";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    generation: u64,
    doc_count: u64,
    embedding_dims: BTreeMap<String, usize>,
    ann: BTreeMap<String, AnnConfig>,
    checksum: String,
}

/// Serializes the snapshot's live view into `dir`, replacing any previous
/// index saved there.
pub fn save_index(snapshot: &IndexSnapshot, dir: &Path) -> Result<(), EngineError> {
    let view = compacted_view(snapshot);
    std::fs::create_dir_all(dir)?;
    let ann_dir = dir.join("ann");
    if ann_dir.exists() {
        std::fs::remove_dir_all(&ann_dir)?;
    }

    write_file(&dir.join("docs.bin"), MAGIC_DOCS, &encode_docs(&view)?)?;
    write_file(&dir.join("postings.bin"), MAGIC_POSTINGS, &encode_postings(&view))?;
    let mut ann_configs = BTreeMap::new();
    for (key, segment) in &view.ann {
        let key_dir = ann_dir.join(key);
        std::fs::create_dir_all(&key_dir)?;
        write_file(&key_dir.join("quantizer.bin"), MAGIC_QUANTIZER, &encode_quantizer(segment)?)?;
        write_file(&key_dir.join("segment.bin"), MAGIC_SEGMENT, &encode_segment(segment))?;
        ann_configs.insert(key.clone(), segment.config().clone());
    }

    let mut manifest = Manifest {
        format_version: FORMAT_VERSION,
        generation: view.generation,
        doc_count: view.documents.len() as u64,
        embedding_dims: view.embedding_dims.clone(),
        ann: ann_configs,
        checksum: String::new(),
    };
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    manifest.checksum = format!("{:016x}", fnv1a64(body.as_bytes()));
    let full = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(dir.join("manifest.json"), full)?;
    Ok(())
}

/// Reads and fully verifies an index directory.
pub fn load_index(dir: &Path) -> Result<IndexSnapshot, EngineError> {
    let manifest = read_manifest(dir)?;
    let (documents, doc_ids) = decode_docs(
        &read_file(&dir.join("docs.bin"), MAGIC_DOCS)?,
        &file_name(dir, "docs.bin"),
        &manifest,
    )?;
    let postings = decode_postings(
        &read_file(&dir.join("postings.bin"), MAGIC_POSTINGS)?,
        &file_name(dir, "postings.bin"),
        documents.len(),
    )?;
    // The posting lists must be exactly what the documents imply; anything
    // else means the files disagree.
    let derived = derive_postings(&documents);
    if derived != postings {
        return Err(EngineError::Format {
            file: file_name(dir, "postings.bin"),
            message: "posting lists disagree with the stored documents".into(),
        });
    }

    let mut ann = BTreeMap::new();
    for (key, config) in &manifest.ann {
        let key_dir = dir.join("ann").join(key);
        let qfile = format!("{}", key_dir.join("quantizer.bin").display());
        let quant = decode_quantizer(
            &read_file(&key_dir.join("quantizer.bin"), MAGIC_QUANTIZER)?,
            &qfile,
        )?;
        if &quant.key != key || &quant.config != config {
            return Err(EngineError::Format {
                file: qfile,
                message: "quantizer identity disagrees with the manifest".into(),
            });
        }
        if manifest.embedding_dims.get(key) != Some(&quant.input_dim) {
            return Err(EngineError::Format {
                file: qfile,
                message: "quantizer input dimension disagrees with the manifest".into(),
            });
        }
        let sfile = format!("{}", key_dir.join("segment.bin").display());
        let (seg_key, clusters) =
            decode_segment(&read_file(&key_dir.join("segment.bin"), MAGIC_SEGMENT)?, &sfile)?;
        if &seg_key != key {
            return Err(EngineError::Format {
                file: sfile.clone(),
                message: "segment key disagrees with the manifest".into(),
            });
        }
        let segment = AnnSegment::from_parts(
            quant.key,
            quant.config,
            quant.input_dim,
            quant.transform,
            quant.coarse,
            quant.pq,
            clusters,
        )
        .map_err(|message| EngineError::Format { file: sfile.clone(), message })?;
        // Cluster postings must reference exactly the documents that carry
        // this embedding key.
        let mut indexed: Vec<u32> = segment
            .clusters()
            .iter()
            .flat_map(|c| c.entries.iter().map(|e| e.doc_ordinal))
            .collect();
        indexed.sort_unstable();
        let expect: Vec<u32> = documents
            .iter()
            .enumerate()
            .filter(|(_, d)| d.as_ref().is_some_and(|d| d.embeddings.contains_key(key)))
            .map(|(ord, _)| ord as u32)
            .collect();
        if indexed != expect {
            return Err(EngineError::Format {
                file: sfile,
                message: "segment entries disagree with the stored documents".into(),
            });
        }
        ann.insert(key.clone(), Arc::new(segment));
    }

    Ok(IndexSnapshot {
        documents,
        doc_ids,
        postings,
        ann,
        embedding_dims: manifest.embedding_dims,
        generation: manifest.generation,
    })
}

fn file_name(dir: &Path, name: &str) -> String {
    format!("{}", dir.join(name).display())
}

fn read_manifest(dir: &Path) -> Result<Manifest, EngineError> {
    let file = file_name(dir, "manifest.json");
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let mut manifest: Manifest = serde_json::from_str(&text).map_err(|e| EngineError::Format {
        file: file.clone(),
        message: e.to_string(),
    })?;
    let stated = std::mem::take(&mut manifest.checksum);
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let computed = format!("{:016x}", fnv1a64(body.as_bytes()));
    if stated != computed {
        return Err(EngineError::Checksum { file });
    }
    if manifest.format_version != FORMAT_VERSION {
        return Err(EngineError::FormatVersion {
            file,
            got: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(manifest)
}

// ---- binary file framing ----

fn write_file(path: &Path, magic: &[u8; 8], payload: &[u8]) -> Result<(), EngineError> {
    let mut buf = Vec::with_capacity(payload.len() + 20);
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(payload);
    let checksum = fnv1a64(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    std::fs::write(path, buf)?;
    Ok(())
}

fn read_file(path: &Path, magic: &[u8; 8]) -> Result<Vec<u8>, EngineError> {
    let file = format!("{}", path.display());
    let bytes = std::fs::read(path)?;
    if bytes.len() < 20 {
        return Err(EngineError::Format { file, message: "file too short".into() });
    }
    let (body, footer) = bytes.split_at(bytes.len() - 8);
    let stated = u64::from_le_bytes(footer.try_into().expect("8-byte footer"));
    if fnv1a64(body) != stated {
        return Err(EngineError::Checksum { file });
    }
    if &body[..8] != magic {
        return Err(EngineError::Format { file, message: "wrong file type".into() });
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4-byte version"));
    if version != FORMAT_VERSION {
        return Err(EngineError::FormatVersion { file, got: version, expected: FORMAT_VERSION });
    }
    Ok(body[12..].to_vec())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    file: &'a str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], file: &'a str) -> Self {
        Reader { buf, pos: 0, file }
    }

    fn fail(&self, message: impl Into<String>) -> EngineError {
        EngineError::Format { file: self.file.to_string(), message: message.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], EngineError> {
        if self.pos + n > self.buf.len() {
            return Err(self.fail("unexpected end of file"));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, EngineError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, EngineError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, EngineError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32, EngineError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64, EngineError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// Length guarded against truncated files claiming absurd counts.
    fn len(&mut self, what: &str) -> Result<usize, EngineError> {
        let n = self.u64()? as usize;
        if n > self.buf.len().saturating_add(1 << 20) {
            return Err(self.fail(format!("{what} count {n} exceeds file size")));
        }
        Ok(n)
    }

    fn string(&mut self) -> Result<String, EngineError> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.fail("invalid utf-8 string"))
    }

    fn finish(self) -> Result<(), EngineError> {
        if self.pos != self.buf.len() {
            return Err(self.fail("trailing bytes after payload"));
        }
        Ok(())
    }
}

fn put_string(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn put_opt_bytes(buf: &mut Vec<u8>, bytes: &Option<Vec<u8>>) {
    match bytes {
        None => buf.push(0),
        Some(b) => {
            buf.push(1);
            buf.extend_from_slice(&(b.len() as u32).to_le_bytes());
            buf.extend_from_slice(b);
        }
    }
}

fn get_opt_bytes(r: &mut Reader) -> Result<Option<Vec<u8>>, EngineError> {
    match r.u8()? {
        0 => Ok(None),
        1 => {
            let n = r.u32()? as usize;
            Ok(Some(r.take(n)?.to_vec()))
        }
        other => Err(r.fail(format!("invalid option tag {other}"))),
    }
}

// ---- docs.bin ----

fn encode_docs(view: &IndexSnapshot) -> Result<Vec<u8>, EngineError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&(view.documents.len() as u64).to_le_bytes());
    for slot in &view.documents {
        let doc = slot.as_ref().expect("compacted view has no tombstones");
        put_string(&mut buf, &doc.doc_id);
        buf.extend_from_slice(&(doc.terms.len() as u32).to_le_bytes());
        for (term, payload) in &doc.terms {
            put_string(&mut buf, &term.namespace);
            put_string(&mut buf, &term.value);
            put_opt_bytes(&mut buf, payload);
        }
        buf.extend_from_slice(&(doc.embeddings.len() as u32).to_le_bytes());
        for (key, vector) in &doc.embeddings {
            put_string(&mut buf, key);
            buf.extend_from_slice(&(vector.dim() as u32).to_le_bytes());
            for &c in vector.components() {
                buf.extend_from_slice(&c.to_le_bytes());
            }
        }
        let features = serde_json::to_string(&doc.features).map_err(|e| EngineError::Format {
            file: "docs.bin".into(),
            message: e.to_string(),
        })?;
        put_string(&mut buf, &features);
    }
    Ok(buf)
}

type DecodedDocs = (Vec<Option<Arc<Document>>>, BTreeMap<String, u32>);

fn decode_docs(
    payload: &[u8],
    file: &str,
    manifest: &Manifest,
) -> Result<DecodedDocs, EngineError> {
    let mut r = Reader::new(payload, file);
    let count = r.len("document")?;
    if count as u64 != manifest.doc_count {
        return Err(r.fail(format!(
            "{count} documents stored, manifest says {}",
            manifest.doc_count
        )));
    }
    let mut documents = Vec::with_capacity(count);
    let mut doc_ids = BTreeMap::new();
    for ordinal in 0..count {
        let doc_id = r.string()?;
        let n_terms = r.u32()?;
        let mut terms = BTreeMap::new();
        for _ in 0..n_terms {
            let namespace = r.string()?;
            let value = r.string()?;
            let payload = get_opt_bytes(&mut r)?;
            terms.insert(Term { namespace, value }, payload);
        }
        let n_embs = r.u32()?;
        let mut embeddings = BTreeMap::new();
        for _ in 0..n_embs {
            let key = r.string()?;
            let dim = r.u32()? as usize;
            match manifest.embedding_dims.get(&key) {
                Some(&d) if d == dim => {}
                _ => {
                    return Err(r.fail(format!(
                        "embedding {key:?} of dim {dim} not registered in the manifest"
                    )))
                }
            }
            let mut components = Vec::with_capacity(dim);
            for _ in 0..dim {
                components.push(r.f32()?);
            }
            let vector = Vector32::new(components)
                .map_err(|e| r.fail(format!("embedding {key:?}: {e}")))?;
            embeddings.insert(key, vector);
        }
        let features: FeatureRecord = serde_json::from_str(&r.string()?)
            .map_err(|e| r.fail(format!("features for {doc_id:?}: {e}")))?;
        let doc = Document { doc_id, terms, embeddings, features };
        doc.validate().map_err(|e| r.fail(e.to_string()))?;
        if doc_ids.insert(doc.doc_id.clone(), ordinal as u32).is_some() {
            return Err(r.fail(format!("duplicate doc_id {:?}", doc.doc_id)));
        }
        documents.push(Some(Arc::new(doc)));
    }
    r.finish()?;
    Ok((documents, doc_ids))
}

// ---- postings.bin ----

fn encode_postings(view: &IndexSnapshot) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&(view.postings.len() as u64).to_le_bytes());
    for (term, list) in &view.postings {
        put_string(&mut buf, &term.namespace);
        put_string(&mut buf, &term.value);
        buf.extend_from_slice(&(list.entries.len() as u64).to_le_bytes());
        for entry in &list.entries {
            buf.extend_from_slice(&entry.doc_ordinal.to_le_bytes());
            put_opt_bytes(&mut buf, &entry.payload);
        }
    }
    buf
}

fn decode_postings(
    payload: &[u8],
    file: &str,
    doc_count: usize,
) -> Result<BTreeMap<Term, Arc<PostingList>>, EngineError> {
    let mut r = Reader::new(payload, file);
    let n_terms = r.len("term")?;
    let mut postings = BTreeMap::new();
    for _ in 0..n_terms {
        let namespace = r.string()?;
        let value = r.string()?;
        let term = Term { namespace, value };
        let n_entries = r.len("posting entry")?;
        let mut entries = Vec::with_capacity(n_entries);
        for _ in 0..n_entries {
            let doc_ordinal = r.u32()?;
            if doc_ordinal as usize >= doc_count {
                return Err(r.fail(format!("ordinal {doc_ordinal} out of range")));
            }
            let payload = get_opt_bytes(&mut r)?;
            if entries
                .last()
                .is_some_and(|prev: &PostingEntry| prev.doc_ordinal >= doc_ordinal)
            {
                return Err(r.fail(format!("posting list for {term} not strictly ascending")));
            }
            entries.push(PostingEntry { doc_ordinal, payload });
        }
        if entries.is_empty() {
            return Err(r.fail(format!("empty posting list for {term}")));
        }
        if postings.insert(term.clone(), Arc::new(PostingList { term, entries })).is_some() {
            return Err(r.fail("duplicate term in postings".to_string()));
        }
    }
    r.finish()?;
    Ok(postings)
}

fn derive_postings(documents: &[Option<Arc<Document>>]) -> BTreeMap<Term, Arc<PostingList>> {
    let mut map: BTreeMap<Term, PostingList> = BTreeMap::new();
    for (ordinal, slot) in documents.iter().enumerate() {
        let Some(doc) = slot else { continue };
        for (term, payload) in &doc.terms {
            map.entry(term.clone())
                .or_insert_with(|| PostingList { term: term.clone(), entries: Vec::new() })
                .entries
                .push(PostingEntry { doc_ordinal: ordinal as u32, payload: payload.clone() });
        }
    }
    map.into_iter().map(|(term, list)| (term, Arc::new(list))).collect()
}

// ---- ann/<key>/quantizer.bin ----

struct QuantizerParts {
    key: String,
    config: AnnConfig,
    input_dim: usize,
    transform: Transform<f64>,
    coarse: CoarseQuantizer<f64>,
    pq: Option<ProductQuantizer<f64>>,
}

fn put_rows(buf: &mut Vec<u8>, rows: &[DenseVector<f64>]) {
    for row in rows {
        for &x in row.components() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}

fn get_rows(
    r: &mut Reader,
    n_rows: usize,
    dim: usize,
) -> Result<Vec<DenseVector<f64>>, EngineError> {
    let mut rows = Vec::with_capacity(n_rows);
    for _ in 0..n_rows {
        let mut components = Vec::with_capacity(dim);
        for _ in 0..dim {
            components.push(r.f64()?);
        }
        rows.push(DenseVector::new(components).map_err(|e| r.fail(e.to_string()))?);
    }
    Ok(rows)
}

fn encode_quantizer(segment: &AnnSegment) -> Result<Vec<u8>, EngineError> {
    let mut buf = Vec::new();
    put_string(&mut buf, segment.key());
    let config = serde_json::to_string(segment.config()).map_err(|e| EngineError::Format {
        file: "quantizer.bin".into(),
        message: e.to_string(),
    })?;
    put_string(&mut buf, &config);
    buf.extend_from_slice(&(segment.input_dim() as u32).to_le_bytes());
    match segment.transform() {
        Transform::Identity { .. } => buf.push(0),
        Transform::Pca { mean, components } => {
            buf.push(1);
            buf.extend_from_slice(&(components.len() as u32).to_le_bytes());
            put_rows(&mut buf, std::slice::from_ref(mean));
            put_rows(&mut buf, components);
        }
        Transform::Opq { rotation } => {
            buf.push(2);
            put_rows(&mut buf, rotation);
        }
    }
    let coarse = segment.coarse();
    buf.extend_from_slice(&(coarse.num_clusters() as u32).to_le_bytes());
    buf.extend_from_slice(&(coarse.dim() as u32).to_le_bytes());
    put_rows(&mut buf, coarse.centroids());
    match segment.pq() {
        None => buf.push(0),
        Some(pq) => {
            buf.push(1);
            buf.extend_from_slice(&(pq.num_subquantizers() as u32).to_le_bytes());
            buf.extend_from_slice(&(pq.sub_dim() as u32).to_le_bytes());
            for codebook in pq.codebooks() {
                put_rows(&mut buf, codebook);
            }
        }
    }
    Ok(buf)
}

fn decode_quantizer(payload: &[u8], file: &str) -> Result<QuantizerParts, EngineError> {
    let mut r = Reader::new(payload, file);
    let key = r.string()?;
    let config: AnnConfig = serde_json::from_str(&r.string()?)
        .map_err(|e| r.fail(format!("config: {e}")))?;
    let input_dim = r.u32()? as usize;
    let transform = match r.u8()? {
        0 => Transform::identity(input_dim),
        1 => {
            let out_dim = r.u32()? as usize;
            let mean = get_rows(&mut r, 1, input_dim)?.pop().expect("one mean row");
            let components = get_rows(&mut r, out_dim, input_dim)?;
            Transform::Pca { mean, components }
        }
        2 => Transform::Opq { rotation: get_rows(&mut r, input_dim, input_dim)? },
        other => return Err(r.fail(format!("unknown transform tag {other}"))),
    };
    let num_clusters = r.u32()? as usize;
    let coarse_dim = r.u32()? as usize;
    let centroids = get_rows(&mut r, num_clusters, coarse_dim)?;
    let coarse = CoarseQuantizer::new(centroids).map_err(|e| r.fail(e.to_string()))?;
    let pq = match r.u8()? {
        0 => None,
        1 => {
            let m = r.u32()? as usize;
            let sub_dim = r.u32()? as usize;
            if m > 1024 {
                return Err(r.fail(format!("implausible subquantizer count {m}")));
            }
            let mut codebooks = Vec::with_capacity(m);
            for _ in 0..m {
                codebooks.push(get_rows(&mut r, embr_core::CODEBOOK_SIZE, sub_dim)?);
            }
            Some(ProductQuantizer::new(codebooks).map_err(|e| r.fail(e.to_string()))?)
        }
        other => return Err(r.fail(format!("invalid option tag {other}"))),
    };
    r.finish()?;
    Ok(QuantizerParts { key, config, input_dim, transform, coarse, pq })
}

// ---- ann/<key>/segment.bin ----

fn encode_segment(segment: &AnnSegment) -> Vec<u8> {
    let mut buf = Vec::new();
    put_string(&mut buf, segment.key());
    buf.extend_from_slice(&(segment.clusters().len() as u32).to_le_bytes());
    buf.extend_from_slice(&(segment.code_len() as u32).to_le_bytes());
    for cluster in segment.clusters() {
        buf.extend_from_slice(&(cluster.entries.len() as u64).to_le_bytes());
        for entry in &cluster.entries {
            buf.extend_from_slice(&entry.doc_ordinal.to_le_bytes());
            buf.extend_from_slice(&entry.code);
        }
    }
    buf
}

fn decode_segment(payload: &[u8], file: &str) -> Result<(String, Vec<ClusterPosting>), EngineError> {
    let mut r = Reader::new(payload, file);
    let key = r.string()?;
    let num_clusters = r.u32()? as usize;
    let code_len = r.u32()? as usize;
    let mut clusters = Vec::with_capacity(num_clusters);
    for _ in 0..num_clusters {
        let n_entries = r.len("segment entry")?;
        let mut entries = Vec::with_capacity(n_entries);
        for _ in 0..n_entries {
            let doc_ordinal = r.u32()?;
            let code = r.take(code_len)?.to_vec();
            entries.push(SegmentEntry { doc_ordinal, code });
        }
        clusters.push(ClusterPosting { entries });
    }
    r.finish()?;
    Ok((key, clusters))
}
