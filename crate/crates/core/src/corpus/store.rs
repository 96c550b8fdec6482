//! On-disk corpus directory.
//!
//! ```text
//! <dir>/MANIFEST         "BKNN-CORPUS\n1\n" followed by a JSON object (counts, normalization)
//! <dir>/vocab.txt        one surface form per line, line number = token id
//! <dir>/documents.jsonl  one tokenized Document per line, in doc_id order
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, Document, Vocabulary};
use crate::error::{Error, Result};

pub const CORPUS_MAGIC: &str = "BKNN-CORPUS\n1";

const MANIFEST: &str = "MANIFEST";
const VOCAB: &str = "vocab.txt";
const DOCUMENTS: &str = "documents.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Normalization {
    lowercase: bool,
    unicode_form: String,
    strip_control: bool,
    collapse_whitespace: bool,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            lowercase: true,
            unicode_form: "NFC".into(),
            strip_control: true,
            collapse_whitespace: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CorpusManifest {
    doc_count: usize,
    sentence_count: usize,
    token_count: usize,
    vocab_size: usize,
    normalization: Normalization,
}

pub(super) fn save(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let vocab_path = dir.join(VOCAB);
    corpus.vocab().save(&vocab_path)?;

    let docs_path = dir.join(DOCUMENTS);
    let file = fs::File::create(&docs_path).map_err(|e| Error::io(&docs_path, e))?;
    let mut out = BufWriter::new(file);
    for doc in corpus.documents() {
        let line = serde_json::to_string(doc).map_err(|e| Error::json("document", e))?;
        writeln!(out, "{line}").map_err(|e| Error::io(&docs_path, e))?;
    }
    out.flush().map_err(|e| Error::io(&docs_path, e))?;

    let manifest = CorpusManifest {
        doc_count: corpus.len(),
        sentence_count: corpus.documents().iter().map(|d| d.sentences.len()).sum(),
        token_count: corpus.occurrence_count(),
        vocab_size: corpus.vocab().len(),
        normalization: Normalization::default(),
    };
    let body = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("manifest", e))?;
    // Written last: a directory without a readable manifest is an incomplete ingest.
    let manifest_path = dir.join(MANIFEST);
    fs::write(&manifest_path, format!("{CORPUS_MAGIC}\n{body}\n"))
        .map_err(|e| Error::io(&manifest_path, e))
}

pub(super) fn load(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join(MANIFEST);
    let raw = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let Some(body) = raw
        .strip_prefix(CORPUS_MAGIC)
        .and_then(|r| r.strip_prefix('\n'))
    else {
        return Err(Error::format(
            manifest_path.display().to_string(),
            0,
            "missing BKNN-CORPUS version 1 magic",
        ));
    };
    let manifest: CorpusManifest = serde_json::from_str(body)
        .map_err(|e| Error::json(manifest_path.display().to_string(), e))?;
    if manifest.normalization != Normalization::default() {
        return Err(Error::InvalidArgument(format!(
            "{}: unsupported normalization options {:?}",
            manifest_path.display(),
            manifest.normalization
        )));
    }

    let vocab = Vocabulary::load(&dir.join(VOCAB))?;

    let docs_path = dir.join(DOCUMENTS);
    let file = fs::File::open(&docs_path).map_err(|e| Error::io(&docs_path, e))?;
    let mut documents = Vec::with_capacity(manifest.doc_count);
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&docs_path, e))?;
        let doc: Document = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{} line {}", docs_path.display(), n + 1), e))?;
        documents.push(doc);
    }
    let corpus = Corpus::from_parts(documents, vocab)?;

    let sentences: usize = corpus.documents().iter().map(|d| d.sentences.len()).sum();
    if corpus.len() != manifest.doc_count
        || sentences != manifest.sentence_count
        || corpus.occurrence_count() != manifest.token_count
        || corpus.vocab().len() != manifest.vocab_size
    {
        return Err(Error::InvalidArgument(format!(
            "{}: counts disagree with stored documents",
            manifest_path.display()
        )));
    }
    Ok(corpus)
}
