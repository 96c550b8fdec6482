//! The key-value datastore of (masked-context embedding, token) records.
//!
//! Records are grouped by document in corpus order, so the records of any set of
//! documents form a few contiguous ranges.
//!
//! Binary layout, little-endian throughout:
//!
//! ```text
//! header  "BKNNDS\0\0" | version u16 = 1 | dim u32 | record_count u64
//! record  doc_id u32 | sentence_index u16 | token_index u16 | token_id u32 | dim x f32
//! ```
//!
//! The JSON manifest next to the binary (`<file>.manifest.json`) carries the per-document
//! ranges, the embedder provenance and the SHA-256 digests of the binary. It is written
//! after the binary is complete and synced, so a store without a matching manifest is an
//! unfinished build.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::chunk_digest;
use crate::corpus::{doc_occurrences, Corpus, Occurrence, TokenId};
use crate::embedder::{embed_masked_context, ContextEmbedder, EmbedderConfig};
use crate::error::{Error, Result};

pub const DATASTORE_MAGIC: &[u8; 8] = b"BKNNDS\0\0";
pub const DATASTORE_VERSION: u16 = 1;
pub const HEADER_LEN: u64 = 8 + 2 + 4 + 8;
/// Granularity of the per-chunk digests in the manifest.
pub const MANIFEST_CHUNK: usize = 1 << 16;

const RECORD_META_LEN: u64 = 4 + 2 + 2 + 4;
const BUILD_BATCH_DOCS: usize = 64;

pub fn record_len(dim: usize) -> u64 {
    RECORD_META_LEN + 4 * dim as u64
}

pub fn manifest_path(store: &Path) -> PathBuf {
    let mut name = store.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RecordMeta {
    pub doc_id: u32,
    pub sentence_index: u16,
    pub token_index: u16,
    pub token_id: TokenId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatastoreRecord {
    /// Position of the record in the store.
    pub id: u64,
    pub meta: RecordMeta,
    pub key: Vec<f32>,
}

/// Half-open range of record ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RecordRange {
    pub start: u64,
    pub end: u64,
}

impl RecordRange {
    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRange {
    pub doc_id: u32,
    pub first_record: u64,
    pub count: u64,
}

impl DocumentRange {
    pub fn records(&self) -> RecordRange {
        RecordRange {
            start: self.first_record,
            end: self.first_record + self.count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatastoreManifest {
    pub format_version: u16,
    pub dim: usize,
    pub record_count: u64,
    pub doc_count: u64,
    pub embedder: EmbedderConfig,
    /// One entry per document, indexed by doc id.
    pub documents: Vec<DocumentRange>,
    /// Occurrences an external exporter could not embed (zero for in-process builds).
    #[serde(default)]
    pub skipped_occurrences: u64,
    pub sha256: String,
    pub chunk_size: usize,
    /// Truncated SHA-256 (8 bytes, hex) of each `chunk_size` slice of the binary.
    pub chunk_sha256: Vec<String>,
}

impl DatastoreManifest {
    /// Ranges must be in doc-id order, contiguous, and cover `[0, record_count)`.
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::InvalidArgument(format!("manifest: {detail}")));
        if self.format_version != DATASTORE_VERSION {
            return bad(format!(
                "unsupported format version {}",
                self.format_version
            ));
        }
        if self.dim != self.embedder.dim {
            return bad(format!(
                "dim {} disagrees with embedder dim {}",
                self.dim, self.embedder.dim
            ));
        }
        if self.doc_count != self.documents.len() as u64 {
            return bad(format!(
                "doc_count {} but {} document ranges",
                self.doc_count,
                self.documents.len()
            ));
        }
        let mut next = 0u64;
        for (i, doc) in self.documents.iter().enumerate() {
            if doc.doc_id as usize != i {
                return bad(format!("range {i} belongs to doc {}", doc.doc_id));
            }
            if doc.first_record != next {
                return bad(format!(
                    "doc {} starts at {} instead of {next}",
                    doc.doc_id, doc.first_record
                ));
            }
            next += doc.count;
        }
        if next != self.record_count {
            return bad(format!(
                "ranges cover {next} records, record_count is {}",
                self.record_count
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&raw).map_err(|e| Error::json(path.display().to_string(), e))
    }

    fn save(&self, path: &Path) -> Result<()> {
        let mut body =
            serde_json::to_vec_pretty(self).map_err(|e| Error::json("datastore manifest", e))?;
        body.push(b'\n');
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

/// Read access to datastore records.
pub trait RecordSource: Send + Sync {
    fn dim(&self) -> usize;

    fn record_count(&self) -> u64;

    /// Per-document record ranges for a set of documents (the subset D').
    fn slice(&self, doc_ids: &[u32]) -> Result<Vec<RecordRange>>;

    /// Visit the records of `ranges` in range order.
    fn for_each_record(
        &self,
        ranges: &[RecordRange],
        visit: &mut dyn FnMut(u64, RecordMeta, &[f32]),
    ) -> Result<()>;

    fn full_range(&self) -> Vec<RecordRange> {
        vec![RecordRange {
            start: 0,
            end: self.record_count(),
        }]
    }
}

fn slice_documents(documents: &[DocumentRange], doc_ids: &[u32]) -> Result<Vec<RecordRange>> {
    let unique: BTreeSet<u32> = doc_ids.iter().copied().collect();
    unique
        .into_iter()
        .map(|id| {
            documents
                .get(id as usize)
                .map(DocumentRange::records)
                .ok_or(Error::UnknownDocument(id))
        })
        .collect()
}

fn check_ranges(ranges: &[RecordRange], record_count: u64) -> Result<()> {
    for r in ranges {
        if r.start > r.end || r.end > record_count {
            return Err(Error::InvalidArgument(format!(
                "record range {}..{} outside store of {record_count} records",
                r.start, r.end
            )));
        }
    }
    Ok(())
}

fn encode_header(dim: usize, record_count: u64) -> [u8; HEADER_LEN as usize] {
    let mut h = [0u8; HEADER_LEN as usize];
    h[..8].copy_from_slice(DATASTORE_MAGIC);
    h[8..10].copy_from_slice(&DATASTORE_VERSION.to_le_bytes());
    h[10..14].copy_from_slice(&(dim as u32).to_le_bytes());
    h[14..22].copy_from_slice(&record_count.to_le_bytes());
    h
}

fn encode_record(out: &mut Vec<u8>, meta: &RecordMeta, key: &[f32]) {
    out.extend_from_slice(&meta.doc_id.to_le_bytes());
    out.extend_from_slice(&meta.sentence_index.to_le_bytes());
    out.extend_from_slice(&meta.token_index.to_le_bytes());
    out.extend_from_slice(&meta.token_id.to_le_bytes());
    for v in key {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn decode_record(what: &str, offset: u64, raw: &[u8], key: &mut Vec<f32>) -> Result<RecordMeta> {
    let meta = RecordMeta {
        doc_id: u32::from_le_bytes(raw[0..4].try_into().unwrap()),
        sentence_index: u16::from_le_bytes(raw[4..6].try_into().unwrap()),
        token_index: u16::from_le_bytes(raw[6..8].try_into().unwrap()),
        token_id: u32::from_le_bytes(raw[8..12].try_into().unwrap()),
    };
    key.clear();
    for (i, c) in raw[12..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(c.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(
                what,
                offset + 12 + 4 * i as u64,
                "non-finite key component",
            ));
        }
        key.push(v);
    }
    Ok(meta)
}

fn occurrence_meta(occ: &Occurrence) -> Result<RecordMeta> {
    let narrow = |v: usize, what: &str| {
        u16::try_from(v).map_err(|_| {
            Error::InvalidArgument(format!(
                "doc {} {what} {v} does not fit the 16-bit record field",
                occ.doc_id
            ))
        })
    };
    Ok(RecordMeta {
        doc_id: occ.doc_id,
        sentence_index: narrow(occ.sentence_index, "sentence index")?,
        token_index: narrow(occ.token_index, "token index")?,
        token_id: occ.token_id,
    })
}

/// Appends records to a store file and commits header and manifest.
struct StoreWriter {
    path: PathBuf,
    out: BufWriter<File>,
    dim: usize,
    record_count: u64,
    documents: Vec<DocumentRange>,
    buf: Vec<u8>,
}

impl StoreWriter {
    fn create(path: &Path, dim: usize) -> Result<Self> {
        // Remove a stale manifest first so an interrupted rebuild cannot pass for complete.
        let manifest = manifest_path(path);
        if manifest.exists() {
            fs::remove_file(&manifest).map_err(|e| Error::io(&manifest, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        out.write_all(&encode_header(dim, 0))
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out,
            dim,
            record_count: 0,
            documents: Vec::new(),
            buf: Vec::new(),
        })
    }

    fn reopen(path: &Path, manifest: &DatastoreManifest) -> Result<Self> {
        let mut file = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let end = HEADER_LEN + manifest.record_count * record_len(manifest.dim);
        file.set_len(end).map_err(|e| Error::io(path, e))?;
        file.seek(SeekFrom::Start(end))
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            dim: manifest.dim,
            record_count: manifest.record_count,
            documents: manifest.documents.clone(),
            buf: Vec::new(),
        })
    }

    fn begin_document(&mut self, doc_id: u32) -> Result<()> {
        if doc_id as usize != self.documents.len() {
            return Err(Error::InvalidArgument(format!(
                "documents must be written in order: expected doc {}, got {doc_id}",
                self.documents.len()
            )));
        }
        self.documents.push(DocumentRange {
            doc_id,
            first_record: self.record_count,
            count: 0,
        });
        Ok(())
    }

    fn push(&mut self, meta: &RecordMeta, key: &[f32]) -> Result<()> {
        if key.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: key.len(),
                context: format!(
                    "record {} (doc {}, sentence {}, token {})",
                    self.record_count, meta.doc_id, meta.sentence_index, meta.token_index
                ),
            });
        }
        let current = self
            .documents
            .last_mut()
            .filter(|d| d.doc_id == meta.doc_id);
        let Some(current) = current else {
            return Err(Error::Invariant(format!(
                "record for doc {} written outside its document",
                meta.doc_id
            )));
        };
        current.count += 1;
        self.buf.clear();
        encode_record(&mut self.buf, meta, key);
        self.out
            .write_all(&self.buf)
            .map_err(|e| Error::io(&self.path, e))?;
        self.record_count += 1;
        Ok(())
    }

    fn commit(self, embedder: &EmbedderConfig, skipped: u64) -> Result<Datastore> {
        let path = self.path;
        let mut file = self
            .out
            .into_inner()
            .map_err(|e| Error::io(&path, e.into_error()))?;
        file.seek(SeekFrom::Start(0))
            .map_err(|e| Error::io(&path, e))?;
        file.write_all(&encode_header(self.dim, self.record_count))
            .map_err(|e| Error::io(&path, e))?;
        file.sync_all().map_err(|e| Error::io(&path, e))?;
        drop(file);

        let (sha256, chunk_sha256) = digest_file(&path)?;
        let manifest = DatastoreManifest {
            format_version: DATASTORE_VERSION,
            dim: self.dim,
            record_count: self.record_count,
            doc_count: self.documents.len() as u64,
            embedder: embedder.clone(),
            documents: self.documents,
            skipped_occurrences: skipped,
            sha256,
            chunk_size: MANIFEST_CHUNK,
            chunk_sha256,
        };
        manifest.validate()?;
        manifest.save(&manifest_path(&path))?;
        Datastore::open(&path)
    }
}

fn digest_file(path: &Path) -> Result<(String, Vec<String>)> {
    use sha2::{Digest, Sha256};
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut whole = Sha256::new();
    let mut chunks = Vec::new();
    let mut buf = vec![0u8; MANIFEST_CHUNK];
    loop {
        let n = read_full(&mut file, &mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        whole.update(&buf[..n]);
        chunks.push(hex::encode(chunk_digest(&buf[..n])));
        if n < buf.len() {
            break;
        }
    }
    Ok((hex::encode(whole.finalize()), chunks))
}

fn read_full(reader: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..])? {
            0 => break,
            n => filled += n,
        }
    }
    Ok(filled)
}

type KeyedRecord = (RecordMeta, Vec<f32>);

fn write_documents(
    writer: &mut StoreWriter,
    corpus: &Corpus,
    doc_ids: Range<u32>,
    embedder: &dyn ContextEmbedder,
) -> Result<()> {
    let ids: Vec<u32> = doc_ids.collect();
    for batch in ids.chunks(BUILD_BATCH_DOCS) {
        let embedded: Vec<Result<Vec<KeyedRecord>>> = batch
            .par_iter()
            .map(|&doc_id| {
                let doc = corpus
                    .document(doc_id)
                    .ok_or(Error::UnknownDocument(doc_id))?;
                let mut out = Vec::with_capacity(doc.token_count());
                let mut surfaces: Vec<&str> = Vec::new();
                let mut last_sentence = usize::MAX;
                for occ in doc_occurrences(doc) {
                    if occ.sentence_index != last_sentence {
                        surfaces = corpus
                            .sentence_surfaces(doc_id, occ.sentence_index)
                            .ok_or_else(|| Error::Invariant("sentence out of range".into()))?;
                        last_sentence = occ.sentence_index;
                    }
                    let meta = occurrence_meta(&occ)?;
                    let key = embed_masked_context(embedder, &surfaces, occ.token_index).map_err(
                        |e| match e {
                            Error::DimensionMismatch {
                                expected, found, ..
                            } => Error::DimensionMismatch {
                                expected,
                                found,
                                context: format!(
                                    "doc {doc_id}, sentence {}, token {}",
                                    occ.sentence_index, occ.token_index
                                ),
                            },
                            other => other,
                        },
                    )?;
                    out.push((meta, key.into_values()));
                }
                Ok(out)
            })
            .collect();
        for (&doc_id, records) in batch.iter().zip(embedded) {
            writer.begin_document(doc_id)?;
            for (meta, key) in records? {
                writer.push(&meta, &key)?;
            }
        }
    }
    Ok(())
}

/// Embed every occurrence of `corpus` and write the store to `path`.
pub fn build(corpus: &Corpus, embedder: &dyn ContextEmbedder, path: &Path) -> Result<Datastore> {
    let config = embedder.config().clone();
    config.validate()?;
    let mut writer = StoreWriter::create(path, config.dim)?;
    write_documents(&mut writer, corpus, 0..corpus.len() as u32, embedder)?;
    writer.commit(&config, 0)
}

/// Append the records of `new_docs` (already added to `corpus`) to an existing store.
///
/// Existing records are left byte-for-byte untouched.
pub fn append(
    path: &Path,
    corpus: &Corpus,
    new_docs: Range<u32>,
    embedder: &dyn ContextEmbedder,
) -> Result<Datastore> {
    let store = Datastore::open_verified(path)?;
    let manifest = store.manifest();
    manifest.embedder.ensure_compatible(embedder.config())?;
    if new_docs.start as u64 != manifest.doc_count {
        return Err(Error::InvalidArgument(format!(
            "store holds {} documents; appended documents must start at that id, not {}",
            manifest.doc_count, new_docs.start
        )));
    }
    let mut writer = StoreWriter::reopen(path, manifest)?;
    write_documents(&mut writer, corpus, new_docs, embedder)?;
    writer.commit(&manifest.embedder.clone(), manifest.skipped_occurrences)
}

/// Validate an externally produced store in the exchange format against `corpus` and
/// `expected`, then copy its records to `out` under a freshly computed manifest.
pub fn import(
    exchange: &Path,
    corpus: &Corpus,
    expected: &EmbedderConfig,
    out: &Path,
) -> Result<Datastore> {
    let source = Datastore::open_verified(exchange)?;
    let manifest = source.manifest().clone();
    manifest.embedder.ensure_compatible(expected)?;
    if manifest.doc_count != corpus.len() as u64 {
        return Err(Error::InvalidArgument(format!(
            "exchange store covers {} documents, corpus has {}",
            manifest.doc_count,
            corpus.len()
        )));
    }
    let total = corpus.occurrence_count() as u64;
    if manifest.record_count + manifest.skipped_occurrences != total {
        return Err(Error::InvalidArgument(format!(
            "exchange store accounts for {} emitted + {} skipped occurrences, corpus has {total}",
            manifest.record_count, manifest.skipped_occurrences
        )));
    }
    let mut writer = StoreWriter::create(out, manifest.dim)?;
    copy_validated(&source, corpus, 0..corpus.len() as u32, &mut writer)?;
    writer.commit(&manifest.embedder, manifest.skipped_occurrences)
}

/// Append the records of an exchange store that covers exactly `new_docs`.
///
/// The exchange store numbers its documents from zero; they are shifted onto `new_docs`.
pub fn append_imported(
    path: &Path,
    exchange: &Path,
    corpus: &Corpus,
    new_docs: Range<u32>,
) -> Result<Datastore> {
    let store = Datastore::open_verified(path)?;
    let manifest = store.manifest().clone();
    let source = Datastore::open_verified(exchange)?;
    manifest
        .embedder
        .ensure_compatible(&source.manifest().embedder)?;
    if new_docs.start as u64 != manifest.doc_count {
        return Err(Error::InvalidArgument(format!(
            "appended documents must start at doc {}",
            manifest.doc_count
        )));
    }
    if source.manifest().doc_count != new_docs.len() as u64 {
        return Err(Error::InvalidArgument(format!(
            "exchange store covers {} documents, {} were appended",
            source.manifest().doc_count,
            new_docs.len()
        )));
    }
    let mut writer = StoreWriter::reopen(path, &manifest)?;
    copy_validated(&source, corpus, new_docs, &mut writer)?;
    let skipped = manifest.skipped_occurrences + source.manifest().skipped_occurrences;
    writer.commit(&manifest.embedder, skipped)
}

fn copy_validated(
    source: &Datastore,
    corpus: &Corpus,
    docs: Range<u32>,
    writer: &mut StoreWriter,
) -> Result<()> {
    let shift = docs.start;
    for (local, doc_range) in source.manifest().documents.iter().enumerate() {
        let doc_id = shift + local as u32;
        let doc = corpus
            .document(doc_id)
            .ok_or(Error::UnknownDocument(doc_id))?;
        writer.begin_document(doc_id)?;
        let mut last: Option<(u16, u16)> = None;
        for record in source.scan(&[doc_range.records()])? {
            let mut record = record?;
            if record.meta.doc_id != local as u32 {
                return Err(Error::InvalidArgument(format!(
                    "exchange record {} filed under doc {} belongs to doc {}",
                    record.id, local, record.meta.doc_id
                )));
            }
            let pos = (record.meta.sentence_index, record.meta.token_index);
            if last.is_some_and(|l| l >= pos) {
                return Err(Error::InvalidArgument(format!(
                    "exchange record {} is out of corpus order",
                    record.id
                )));
            }
            last = Some(pos);
            let expected = doc
                .sentences
                .get(pos.0 as usize)
                .and_then(|s| s.tokens.get(pos.1 as usize));
            if expected != Some(&record.meta.token_id) {
                return Err(Error::InvalidArgument(format!(
                    "exchange record {} (doc {doc_id}, sentence {}, token {}) does not match the corpus token",
                    record.id, pos.0, pos.1
                )));
            }
            record.meta.doc_id = doc_id;
            writer.push(&record.meta, &record.key)?;
        }
    }
    Ok(())
}

/// Read handle on a committed store file.
#[derive(Debug, Clone)]
pub struct Datastore {
    path: PathBuf,
    manifest: DatastoreManifest,
}

impl Datastore {
    /// Open a store, checking the manifest, header and file length (but not digests).
    pub fn open(path: &Path) -> Result<Self> {
        let manifest = DatastoreManifest::load(&manifest_path(path))?;
        manifest.validate()?;
        let what = path.display().to_string();
        let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut header = [0u8; HEADER_LEN as usize];
        let n = read_full(&mut file, &mut header).map_err(|e| Error::io(path, e))?;
        if n < header.len() {
            return Err(Error::format(&what, n as u64, "truncated header"));
        }
        if &header[..8] != DATASTORE_MAGIC {
            return Err(Error::format(&what, 0, "bad magic"));
        }
        let version = u16::from_le_bytes(header[8..10].try_into().unwrap());
        if version != DATASTORE_VERSION {
            return Err(Error::format(
                &what,
                8,
                format!("unsupported version {version}"),
            ));
        }
        let dim = u32::from_le_bytes(header[10..14].try_into().unwrap()) as usize;
        if dim != manifest.dim {
            return Err(Error::format(
                &what,
                10,
                format!("header dim {dim}, manifest dim {}", manifest.dim),
            ));
        }
        let count = u64::from_le_bytes(header[14..22].try_into().unwrap());
        if count != manifest.record_count {
            return Err(Error::format(
                &what,
                14,
                format!(
                    "header count {count}, manifest count {}",
                    manifest.record_count
                ),
            ));
        }
        let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        let expected = HEADER_LEN + count * record_len(dim);
        if len != expected {
            return Err(Error::format(
                &what,
                len.min(expected),
                format!("file is {len} bytes, expected {expected} (incomplete or extended build)"),
            ));
        }
        Ok(Self {
            path: path.to_path_buf(),
            manifest,
        })
    }

    pub fn open_verified(path: &Path) -> Result<Self> {
        let store = Self::open(path)?;
        store.verify()?;
        Ok(store)
    }

    /// Check the binary against the manifest digests; a mismatch names the failing chunk.
    pub fn verify(&self) -> Result<()> {
        let what = self.path.display().to_string();
        if self.manifest.chunk_size != MANIFEST_CHUNK {
            return Err(Error::InvalidArgument(format!(
                "{what}: unsupported manifest chunk size {}",
                self.manifest.chunk_size
            )));
        }
        let mut file = File::open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        let mut buf = vec![0u8; MANIFEST_CHUNK];
        let mut offset = 0u64;
        let mut index = 0usize;
        loop {
            let n = read_full(&mut file, &mut buf).map_err(|e| Error::io(&self.path, e))?;
            if n == 0 {
                break;
            }
            let stored = self.manifest.chunk_sha256.get(index);
            if stored.map(String::as_str) != Some(hex::encode(chunk_digest(&buf[..n])).as_str()) {
                return Err(Error::Checksum {
                    what,
                    start: offset,
                    end: offset + n as u64,
                });
            }
            offset += n as u64;
            index += 1;
        }
        if index != self.manifest.chunk_sha256.len() {
            return Err(Error::Checksum {
                what,
                start: offset,
                end: offset,
            });
        }
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn manifest(&self) -> &DatastoreManifest {
        &self.manifest
    }

    pub fn embedder(&self) -> &EmbedderConfig {
        &self.manifest.embedder
    }

    /// Stream records of `ranges` in order without loading the store.
    pub fn scan(&self, ranges: &[RecordRange]) -> Result<ScanIter> {
        check_ranges(ranges, self.manifest.record_count)?;
        let file = File::open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        Ok(ScanIter {
            what: self.path.display().to_string(),
            reader: BufReader::with_capacity(1 << 16, file),
            dim: self.manifest.dim,
            ranges: ranges.to_vec(),
            range_index: 0,
            next_id: ranges.first().map_or(0, |r| r.start),
            positioned: false,
            raw: vec![0u8; record_len(self.manifest.dim) as usize],
            failed: false,
        })
    }

    /// Load every record into memory.
    pub fn load(&self) -> Result<MemoryStore> {
        let mut metas = Vec::with_capacity(self.manifest.record_count as usize);
        let mut keys = Vec::with_capacity(self.manifest.record_count as usize * self.manifest.dim);
        for record in self.scan(&self.full_range())? {
            let record = record?;
            metas.push(record.meta);
            keys.extend_from_slice(&record.key);
        }
        Ok(MemoryStore {
            dim: self.manifest.dim,
            metas,
            keys,
            documents: self.manifest.documents.clone(),
        })
    }
}

impl RecordSource for Datastore {
    fn dim(&self) -> usize {
        self.manifest.dim
    }

    fn record_count(&self) -> u64 {
        self.manifest.record_count
    }

    fn slice(&self, doc_ids: &[u32]) -> Result<Vec<RecordRange>> {
        slice_documents(&self.manifest.documents, doc_ids)
    }

    fn for_each_record(
        &self,
        ranges: &[RecordRange],
        visit: &mut dyn FnMut(u64, RecordMeta, &[f32]),
    ) -> Result<()> {
        for record in self.scan(ranges)? {
            let record = record?;
            visit(record.id, record.meta, &record.key);
        }
        Ok(())
    }
}

/// Streaming iterator over record ranges of a store file.
pub struct ScanIter {
    what: String,
    reader: BufReader<File>,
    dim: usize,
    ranges: Vec<RecordRange>,
    range_index: usize,
    next_id: u64,
    positioned: bool,
    raw: Vec<u8>,
    failed: bool,
}

impl ScanIter {
    fn offset_of(&self, id: u64) -> u64 {
        HEADER_LEN + id * record_len(self.dim)
    }
}

impl Iterator for ScanIter {
    type Item = Result<DatastoreRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            let range = *self.ranges.get(self.range_index)?;
            if self.next_id < range.end {
                break;
            }
            self.range_index += 1;
            self.positioned = false;
            self.next_id = self.ranges.get(self.range_index)?.start;
        }
        let id = self.next_id;
        let offset = self.offset_of(id);
        let result = (|| {
            if !self.positioned {
                self.reader
                    .seek(SeekFrom::Start(offset))
                    .map_err(|e| Error::format(&self.what, offset, e.to_string()))?;
                self.positioned = true;
            }
            let n = read_full(&mut self.reader, &mut self.raw)
                .map_err(|e| Error::format(&self.what, offset, e.to_string()))?;
            if n < self.raw.len() {
                return Err(Error::format(
                    &self.what,
                    offset + n as u64,
                    "truncated record",
                ));
            }
            let mut key = Vec::with_capacity(self.dim);
            let meta = decode_record(&self.what, offset, &self.raw, &mut key)?;
            Ok(DatastoreRecord { id, meta, key })
        })();
        self.next_id += 1;
        if result.is_err() {
            self.failed = true;
        }
        Some(result)
    }
}

/// A datastore held fully in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryStore {
    dim: usize,
    metas: Vec<RecordMeta>,
    keys: Vec<f32>,
    documents: Vec<DocumentRange>,
}

impl MemoryStore {
    /// Records must be grouped by ascending doc id; doc ids `0..=max` all get a range.
    pub fn from_records(dim: usize, records: Vec<(RecordMeta, Vec<f32>)>) -> Result<Self> {
        let mut documents: Vec<DocumentRange> = Vec::new();
        let mut metas = Vec::with_capacity(records.len());
        let mut keys = Vec::with_capacity(records.len() * dim);
        for (i, (meta, key)) in records.into_iter().enumerate() {
            if key.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: key.len(),
                    context: format!("record {i}"),
                });
            }
            while documents.len() <= meta.doc_id as usize {
                documents.push(DocumentRange {
                    doc_id: documents.len() as u32,
                    first_record: i as u64,
                    count: 0,
                });
            }
            if meta.doc_id as usize + 1 != documents.len() {
                return Err(Error::InvalidArgument(format!(
                    "record {i} for doc {} follows a later document",
                    meta.doc_id
                )));
            }
            documents[meta.doc_id as usize].count += 1;
            metas.push(meta);
            keys.extend_from_slice(&key);
        }
        Ok(Self {
            dim,
            metas,
            keys,
            documents,
        })
    }

    pub fn documents(&self) -> &[DocumentRange] {
        &self.documents
    }

    pub fn meta(&self, id: u64) -> Option<RecordMeta> {
        self.metas.get(id as usize).copied()
    }

    pub fn key(&self, id: u64) -> Option<&[f32]> {
        let i = id as usize;
        (i < self.metas.len()).then(|| &self.keys[i * self.dim..(i + 1) * self.dim])
    }
}

impl RecordSource for MemoryStore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn record_count(&self) -> u64 {
        self.metas.len() as u64
    }

    fn slice(&self, doc_ids: &[u32]) -> Result<Vec<RecordRange>> {
        slice_documents(&self.documents, doc_ids)
    }

    fn for_each_record(
        &self,
        ranges: &[RecordRange],
        visit: &mut dyn FnMut(u64, RecordMeta, &[f32]),
    ) -> Result<()> {
        check_ranges(ranges, self.record_count())?;
        for r in ranges {
            for id in r.start..r.end {
                let i = id as usize;
                visit(
                    id,
                    self.metas[i],
                    &self.keys[i * self.dim..(i + 1) * self.dim],
                );
            }
        }
        Ok(())
    }
}
