//! Document ingestion, the shared vocabulary, and enumeration of maskable occurrences.

mod store;
pub mod text;
mod vocab;

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use store::CORPUS_MAGIC;
pub use text::{normalize, split_sentences, tokenize, MASK_TOKEN};
pub use vocab::{TokenId, Vocabulary};

use crate::error::{Error, Result};

/// One line of the JSON-lines corpus input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub title: String,
    pub text: String,
}

impl RawDocument {
    pub fn new(title: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<TokenId>,
    /// Byte offsets into the document's normalized body.
    pub span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: u32,
    pub title: String,
    /// Normalized body text.
    pub body: String,
    pub sentences: Vec<Sentence>,
}

impl Document {
    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(|s| s.tokens.len()).sum()
    }

    pub fn sentence_text(&self, index: usize) -> Option<&str> {
        let (start, end) = self.sentences.get(index)?.span;
        self.body.get(start..end)
    }
}

/// A single token position in the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Occurrence {
    pub doc_id: u32,
    pub sentence_index: usize,
    pub token_index: usize,
    pub token_id: TokenId,
}

/// In-memory corpus: documents in id order plus the vocabulary they share.
///
/// Immutable once built except through [`Corpus::append`], which only adds documents and
/// vocabulary entries and never renumbers existing ones.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    documents: Vec<Document>,
    vocab: Vocabulary,
    titles: HashMap<String, u32>,
}

impl Corpus {
    pub fn ingest<I>(documents: I) -> Result<Self>
    where
        I: IntoIterator<Item = RawDocument>,
    {
        let mut corpus = Corpus::default();
        corpus.append(documents)?;
        Ok(corpus)
    }

    /// Add documents, assigning the next doc ids in input order. Either every document is
    /// added or, on a duplicate title, none is.
    pub fn append<I>(&mut self, documents: I) -> Result<Range<u32>>
    where
        I: IntoIterator<Item = RawDocument>,
    {
        let raw: Vec<RawDocument> = documents.into_iter().collect();
        let mut seen = HashMap::new();
        for doc in &raw {
            let key = normalize(&doc.title);
            if self.titles.contains_key(&key) || seen.insert(key, ()).is_some() {
                return Err(Error::DuplicateTitle(doc.title.clone()));
            }
        }
        let first = self.documents.len() as u32;
        for doc in raw {
            let doc_id = self.documents.len() as u32;
            let body = normalize(&doc.text);
            let sentences = split_sentences(&body)
                .into_iter()
                .map(|span| Sentence {
                    tokens: tokenize(&body[span.0..span.1])
                        .iter()
                        .map(|t| self.vocab.intern(t))
                        .collect(),
                    span,
                })
                .collect();
            self.titles.insert(normalize(&doc.title), doc_id);
            self.documents.push(Document {
                doc_id,
                title: doc.title,
                body,
                sentences,
            });
        }
        Ok(first..self.documents.len() as u32)
    }

    pub(crate) fn from_parts(documents: Vec<Document>, vocab: Vocabulary) -> Result<Self> {
        let mut titles = HashMap::new();
        for (i, doc) in documents.iter().enumerate() {
            if doc.doc_id as usize != i {
                return Err(Error::InvalidArgument(format!(
                    "document at position {i} has doc_id {}",
                    doc.doc_id
                )));
            }
            if titles.insert(normalize(&doc.title), doc.doc_id).is_some() {
                return Err(Error::DuplicateTitle(doc.title.clone()));
            }
            for sentence in &doc.sentences {
                if sentence.tokens.is_empty() {
                    return Err(Error::InvalidArgument(format!(
                        "document {} has an empty sentence",
                        doc.doc_id
                    )));
                }
                if let Some(bad) = sentence.tokens.iter().find(|t| **t as usize >= vocab.len()) {
                    return Err(Error::InvalidArgument(format!(
                        "document {} references token id {bad} outside the vocabulary",
                        doc.doc_id
                    )));
                }
            }
        }
        Ok(Self {
            documents,
            vocab,
            titles,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn document(&self, doc_id: u32) -> Option<&Document> {
        self.documents.get(doc_id as usize)
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Doc id whose normalized title equals `title` after normalization.
    pub fn doc_by_title(&self, title: &str) -> Option<u32> {
        self.titles.get(&normalize(title)).copied()
    }

    pub fn sentence_surfaces(&self, doc_id: u32, sentence_index: usize) -> Option<Vec<&str>> {
        let sentence = self.document(doc_id)?.sentences.get(sentence_index)?;
        sentence
            .tokens
            .iter()
            .map(|t| self.vocab.surface(*t))
            .collect()
    }

    /// Every token position in corpus order.
    pub fn occurrences(&self) -> impl Iterator<Item = Occurrence> + '_ {
        self.documents.iter().flat_map(doc_occurrences)
    }

    pub fn occurrence_count(&self) -> usize {
        self.documents.iter().map(Document::token_count).sum()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        store::save(self, dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        store::load(dir)
    }
}

pub fn doc_occurrences(doc: &Document) -> impl Iterator<Item = Occurrence> + '_ {
    doc.sentences.iter().enumerate().flat_map(move |(si, s)| {
        s.tokens
            .iter()
            .enumerate()
            .map(move |(ti, &token_id)| Occurrence {
                doc_id: doc.doc_id,
                sentence_index: si,
                token_index: ti,
                token_id,
            })
    })
}

/// Read the JSON-lines corpus input format. Blank lines are skipped.
pub fn read_documents_jsonl(path: &Path) -> Result<Vec<RawDocument>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{} line {}", path.display(), n + 1), e))?;
        docs.push(doc);
    }
    Ok(docs)
}
