//! TF-IDF document retrieval over unigram and within-sentence bigram terms.
//!
//! Scoring, for a query term set `Q` and document `d`:
//!
//! ```text
//! score(d) = sum over t in Q of (1 + ln tf(t, d)) * idf(t)^2 / |d|
//! idf(t)   = max(0, ln((N - df(t) + 0.5) / (df(t) + 0.5)))
//! |d|      = sqrt(sum over t in d of ((1 + ln tf(t, d)) * idf(t))^2)
//! ```
//!
//! Documents scoring zero are dropped; ties rank by ascending doc id.
//!
//! Persisted layout (sealed with the checksum trailer from [`crate::binio`]):
//!
//! ```text
//! "BKNNIR\0\0" | version u16 | doc_count u32
//! title_count u64 | (title str, doc_id u32)*      sorted by title
//! doc_count x f64                                   document norms
//! term_count u64 | (kind u8, text str, posting_count u64, (doc_id u32, tf u32)*)*
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8. Terms are sorted by (kind, text).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{seal, unseal, ByteReader, ByteWriter};
use crate::corpus::{normalize, tokenize, Corpus, MASK_TOKEN};
use crate::error::{Error, Result};
use crate::query::ClozeQuery;

pub const IR_MAGIC: &[u8; 8] = b"BKNNIR\0\0";
pub const IR_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TermKind {
    Unigram,
    Bigram,
}

/// A unigram, or two tokens joined by a single space.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IrTerm {
    pub kind: TermKind,
    pub text: String,
}

impl IrTerm {
    pub fn unigram(token: &str) -> Self {
        Self {
            kind: TermKind::Unigram,
            text: token.to_string(),
        }
    }

    pub fn bigram(first: &str, second: &str) -> Self {
        Self {
            kind: TermKind::Bigram,
            text: format!("{first} {second}"),
        }
    }
}

/// Unigrams of `tokens` plus bigrams of adjacent pairs, with repetition.
pub fn terms_of(tokens: &[&str]) -> Vec<IrTerm> {
    tokens
        .iter()
        .map(|t| IrTerm::unigram(t))
        .chain(tokens.windows(2).map(|w| IrTerm::bigram(w[0], w[1])))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IrQueryConfig {
    /// Number of documents retrieved when the subject shortcut does not apply.
    pub top_n: usize,
    pub use_subject_shortcut: bool,
}

impl Default for IrQueryConfig {
    fn default() -> Self {
        Self {
            top_n: 3,
            use_subject_shortcut: true,
        }
    }
}

impl IrQueryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_n == 0 {
            return Err(Error::InvalidArgument("top_n must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn idf(doc_count: u32, df: usize) -> f64 {
    let n = doc_count as f64;
    let df = df as f64;
    ((n - df + 0.5) / (df + 0.5)).ln().max(0.0)
}

pub fn tf_weight(tf: u32) -> f64 {
    1.0 + (tf as f64).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    doc_count: u32,
    postings: BTreeMap<IrTerm, Vec<(u32, u32)>>,
    doc_norms: Vec<f64>,
    titles: BTreeMap<String, u32>,
}

impl InvertedIndex {
    pub fn build(corpus: &Corpus) -> Self {
        let vocab = corpus.vocab();
        let mut postings: BTreeMap<IrTerm, Vec<(u32, u32)>> = BTreeMap::new();
        for doc in corpus.documents() {
            let mut counts: HashMap<IrTerm, u32> = HashMap::new();
            for sentence in &doc.sentences {
                let surfaces: Vec<&str> = sentence
                    .tokens
                    .iter()
                    .map(|t| {
                        vocab
                            .surface(*t)
                            .expect("corpus tokens are in the vocabulary")
                    })
                    .collect();
                for term in terms_of(&surfaces) {
                    *counts.entry(term).or_default() += 1;
                }
            }
            for (term, tf) in counts {
                postings.entry(term).or_default().push((doc.doc_id, tf));
            }
        }
        for list in postings.values_mut() {
            list.sort_unstable();
        }
        let titles = corpus
            .documents()
            .iter()
            .map(|d| (normalize(&d.title), d.doc_id))
            .collect();
        let mut index = Self {
            doc_count: corpus.len() as u32,
            postings,
            doc_norms: Vec::new(),
            titles,
        };
        index.doc_norms = index.compute_norms();
        index
    }

    fn compute_norms(&self) -> Vec<f64> {
        let mut sq = vec![0f64; self.doc_count as usize];
        for list in self.postings.values() {
            let idf = idf(self.doc_count, list.len());
            for &(doc, tf) in list {
                let w = tf_weight(tf) * idf;
                sq[doc as usize] += w * w;
            }
        }
        sq.into_iter().map(f64::sqrt).collect()
    }

    pub fn doc_count(&self) -> u32 {
        self.doc_count
    }

    pub fn df(&self, term: &IrTerm) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn tf(&self, term: &IrTerm, doc_id: u32) -> u32 {
        self.postings
            .get(term)
            .and_then(|l| {
                l.binary_search_by_key(&doc_id, |p| p.0)
                    .ok()
                    .map(|i| l[i].1)
            })
            .unwrap_or(0)
    }

    pub fn doc_norm(&self, doc_id: u32) -> f64 {
        self.doc_norms.get(doc_id as usize).copied().unwrap_or(0.0)
    }

    pub fn terms(&self) -> impl Iterator<Item = &IrTerm> {
        self.postings.keys()
    }

    pub fn doc_by_title(&self, title: &str) -> Option<u32> {
        self.titles.get(&normalize(title)).copied()
    }

    /// Documents with a positive score, best first. Repeated query terms count once.
    pub fn score(&self, query: &[IrTerm]) -> Vec<(u32, f64)> {
        let unique: BTreeSet<&IrTerm> = query.iter().collect();
        let mut scores: BTreeMap<u32, f64> = BTreeMap::new();
        for term in unique {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let idf = idf(self.doc_count, list.len());
            if idf == 0.0 {
                continue;
            }
            for &(doc, tf) in list {
                let norm = self.doc_norms[doc as usize];
                if norm > 0.0 {
                    *scores.entry(doc).or_default() += tf_weight(tf) * idf * idf / norm;
                }
            }
        }
        let mut ranked: Vec<(u32, f64)> = scores.into_iter().filter(|(_, s)| *s > 0.0).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked
    }

    /// Subject title shortcut, else the `top_n` best-scoring documents.
    pub fn retrieve(&self, query: &ClozeQuery, config: &IrQueryConfig) -> Vec<u32> {
        if config.use_subject_shortcut {
            if let Some(doc) = query.subject.as_deref().and_then(|s| self.doc_by_title(s)) {
                return vec![doc];
            }
        }
        self.score(&build_ir_query(query))
            .into_iter()
            .take(config.top_n)
            .map(|(doc, _)| doc)
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(IR_MAGIC);
        w.u16(IR_VERSION);
        w.u32(self.doc_count);
        w.u64(self.titles.len() as u64);
        for (title, doc) in &self.titles {
            w.str(title);
            w.u32(*doc);
        }
        for norm in &self.doc_norms {
            w.f64(*norm);
        }
        w.u64(self.postings.len() as u64);
        for (term, list) in &self.postings {
            w.u8(match term.kind {
                TermKind::Unigram => 0,
                TermKind::Bigram => 1,
            });
            w.str(&term.text);
            w.u64(list.len() as u64);
            for &(doc, tf) in list {
                w.u32(doc);
                w.u32(tf);
            }
        }
        seal(w.into_inner())
    }

    pub fn from_bytes(what: &str, data: &[u8]) -> Result<Self> {
        let body = unseal(what, data)?;
        let mut r = ByteReader::new(what, body);
        r.expect(IR_MAGIC)?;
        let version = r.u16()?;
        if version != IR_VERSION {
            return Err(Error::format(
                what,
                8,
                format!("unsupported version {version}"),
            ));
        }
        let doc_count = r.u32()?;
        let n_titles = r.count(8)?;
        let mut titles = BTreeMap::new();
        for _ in 0..n_titles {
            let title = r.str()?;
            let at = r.pos();
            let doc = r.u32()?;
            if doc >= doc_count {
                return Err(Error::format(
                    what,
                    at,
                    format!("title doc id {doc} out of range"),
                ));
            }
            titles.insert(title, doc);
        }
        let mut doc_norms = Vec::with_capacity(doc_count as usize);
        for _ in 0..doc_count {
            doc_norms.push(r.f64()?);
        }
        let n_terms = r.count(13)?;
        let mut postings = BTreeMap::new();
        for _ in 0..n_terms {
            let at = r.pos();
            let kind = match r.u8()? {
                0 => TermKind::Unigram,
                1 => TermKind::Bigram,
                other => return Err(Error::format(what, at, format!("bad term kind {other}"))),
            };
            let text = r.str()?;
            let n = r.count(8)?;
            let mut list = Vec::with_capacity(n);
            for _ in 0..n {
                let at = r.pos();
                let doc = r.u32()?;
                let tf = r.u32()?;
                if doc >= doc_count || tf == 0 {
                    return Err(Error::format(what, at, "invalid posting"));
                }
                list.push((doc, tf));
            }
            postings.insert(IrTerm { kind, text }, list);
        }
        r.finish()?;
        Ok(Self {
            doc_count,
            postings,
            doc_norms,
            titles,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&path.display().to_string(), &data)
    }
}

/// Query terms: from the subject when there is one, otherwise from the question with
/// the mask removed.
pub fn build_ir_query(query: &ClozeQuery) -> Vec<IrTerm> {
    match &query.subject {
        Some(subject) => {
            let tokens = tokenize(&normalize(subject));
            let refs: Vec<&str> = tokens.iter().map(String::as_str).collect();
            terms_of(&refs)
        }
        None => {
            let refs: Vec<&str> = query
                .tokens
                .iter()
                .map(String::as_str)
                .filter(|t| *t != MASK_TOKEN)
                .collect();
            terms_of(&refs)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::RawDocument;

    fn texts(terms: &[IrTerm]) -> BTreeSet<String> {
        terms.iter().map(|t| t.text.clone()).collect()
    }

    #[test]
    fn bigrams_stay_inside_sentences() {
        let c = Corpus::ingest([RawDocument::new("d", "a b c")]).unwrap();
        let idx = InvertedIndex::build(&c);
        let all: BTreeSet<String> = idx.terms().map(|t| t.text.clone()).collect();
        assert_eq!(all, ["a", "b", "c", "a b", "b c"].map(String::from).into());

        let c = Corpus::ingest([RawDocument::new("d", "a b. c")]).unwrap();
        let idx = InvertedIndex::build(&c);
        let bigrams: BTreeSet<String> = idx
            .terms()
            .filter(|t| t.kind == TermKind::Bigram)
            .map(|t| t.text.clone())
            .collect();
        assert_eq!(bigrams, ["a b", "b ."].map(String::from).into());
        assert_eq!(idx.df(&IrTerm::bigram(".", "c")), 0);
    }

    #[test]
    fn ir_query_from_subject_or_question() {
        let q = ClozeQuery::parse("q", "[MASK] wrote ulysses").unwrap();
        assert_eq!(
            texts(&build_ir_query(&q)),
            ["wrote", "ulysses", "wrote ulysses"]
                .map(String::from)
                .into()
        );
        let q = ClozeQuery::parse("q", "X was born in [MASK]")
            .unwrap()
            .with_subject("Ivo Tarsen");
        assert_eq!(
            texts(&build_ir_query(&q)),
            ["ivo", "tarsen", "ivo tarsen"].map(String::from).into()
        );
    }

    fn three_docs() -> Corpus {
        Corpus::ingest([
            RawDocument::new("Alpha", "apple banana apple"),
            RawDocument::new("Beta", "banana cherry"),
            RawDocument::new("Gamma", "cherry date"),
            RawDocument::new("Delta", "elder fig"),
        ])
        .unwrap()
    }

    #[test]
    fn unique_term_ranks_its_document_first() {
        let idx = InvertedIndex::build(&three_docs());
        let ranked = idx.score(&[IrTerm::unigram("date")]);
        assert_eq!(ranked[0].0, 2);
        assert_eq!(ranked.len(), 1);
        assert!(idx.score(&[IrTerm::unigram("zebra")]).is_empty());
    }

    #[test]
    fn subject_shortcut_wins_over_scores() {
        let idx = InvertedIndex::build(&three_docs());
        let q = ClozeQuery::parse("q", "[MASK] grows apple")
            .unwrap()
            .with_subject("gamma");
        let config = IrQueryConfig::default();
        assert_eq!(idx.retrieve(&q, &config), vec![2]);
        let no_shortcut = IrQueryConfig {
            use_subject_shortcut: false,
            ..config
        };
        // "gamma" is not a body term: nothing scores.
        assert!(idx.retrieve(&q, &no_shortcut).is_empty());
    }

    #[test]
    fn byte_round_trip() {
        let idx = InvertedIndex::build(&three_docs());
        let bytes = idx.to_bytes();
        let back = InvertedIndex::from_bytes("ir", &bytes).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.to_bytes(), bytes);
    }
}
