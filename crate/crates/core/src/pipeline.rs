//! Query answering: language-model prediction, retrieval-restricted kNN prediction and
//! their interpolation.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ann::IvfIndex;
use crate::corpus::{normalize, Corpus, TokenId, Vocabulary, MASK_TOKEN};
use crate::datastore::RecordSource;
use crate::distribution::{sort_ranking, TokenDistribution};
use crate::embedder::{embed_query, ContextEmbedder, ImportedQueryEmbeddings};
use crate::error::{Error, Result};
use crate::ir::{InvertedIndex, IrQueryConfig};
use crate::knn::{knn, neighbors_to_distribution, KnnConfig, Neighbor};
use crate::query::ClozeQuery;

/// The token ids over which predictions are compared and ranked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateVocabulary {
    ids: BTreeSet<TokenId>,
    sorted: Vec<TokenId>,
}

impl CandidateVocabulary {
    pub fn new(ids: impl IntoIterator<Item = TokenId>, vocab: &Vocabulary) -> Result<Self> {
        let ids: BTreeSet<TokenId> = ids.into_iter().collect();
        if ids.is_empty() {
            return Err(Error::InvalidArgument(
                "candidate vocabulary is empty".into(),
            ));
        }
        if let Some(bad) = ids.iter().find(|id| vocab.surface(**id).is_none()) {
            return Err(Error::InvalidArgument(format!(
                "candidate token id {bad} is not in the vocabulary"
            )));
        }
        let sorted = ids.iter().copied().collect();
        Ok(Self { ids, sorted })
    }

    pub fn full(vocab: &Vocabulary) -> Result<Self> {
        Self::new(vocab.iter().map(|(id, _)| id), vocab)
    }

    pub fn from_surfaces<I, S>(surfaces: I, vocab: &Vocabulary) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let ids = surfaces
            .into_iter()
            .map(|s| {
                let s = s.as_ref();
                vocab.get(s).ok_or_else(|| {
                    Error::InvalidArgument(format!("candidate {s:?} is not in the vocabulary"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(ids, vocab)
    }

    /// One token per line, in the vocabulary file format.
    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let listed = Vocabulary::load(path)?;
        Self::from_surfaces(listed.iter().map(|(_, s)| s), vocab)
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.ids.contains(&id)
    }

    pub fn ids(&self) -> &BTreeSet<TokenId> {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }
}

/// Every candidate ranked by descending probability, ties by ascending token id.
pub fn rank_candidates(
    distribution: &TokenDistribution,
    candidates: &CandidateVocabulary,
) -> Vec<(TokenId, f64)> {
    let mut ranked: Vec<(TokenId, f64)> = candidates
        .sorted
        .iter()
        .map(|id| (*id, distribution.get(*id)))
        .collect();
    sort_ranking(&mut ranked);
    ranked
}

/// Zero-based position of `gold` in [`rank_candidates`], without building the ranking.
pub fn gold_rank(
    distribution: &TokenDistribution,
    candidates: &CandidateVocabulary,
    gold: TokenId,
) -> Option<usize> {
    if !candidates.contains(gold) {
        return None;
    }
    let p = distribution.get(gold);
    let mut ahead = 0;
    let mut zero_ahead = candidates.sorted.partition_point(|id| *id < gold);
    for (id, q) in distribution.iter() {
        if !candidates.contains(id) || id == gold {
            continue;
        }
        if q > 0.0 && id < gold {
            zero_ahead -= 1;
        }
        if q > p || (q == p && id < gold) {
            ahead += 1;
        }
    }
    if p == 0.0 {
        ahead += zero_ahead;
    }
    Some(ahead)
}

/// Source of LM predictions over the candidate vocabulary.
pub trait LanguageModel: Send + Sync {
    fn predict(&self, query: &ClozeQuery) -> Result<TokenDistribution>;
}

/// Count-based stand-in for a masked language model.
///
/// Each candidate gets weight `1 + unigram(c) + sum of cooc(t, c)` over the distinct
/// in-vocabulary context tokens `t` of the query, where `cooc` counts sentences that
/// contain both tokens. Without counts every candidate gets `1 / |candidates|`.
#[derive(Debug, Clone)]
pub struct ReferenceLm {
    vocab: Vocabulary,
    candidates: Vec<TokenId>,
    unigram: HashMap<TokenId, u64>,
    cooccurrence: HashMap<TokenId, HashMap<TokenId, u64>>,
}

impl ReferenceLm {
    pub fn uniform(vocab: &Vocabulary, candidates: &CandidateVocabulary) -> Self {
        Self {
            vocab: vocab.clone(),
            candidates: candidates.sorted.clone(),
            unigram: HashMap::new(),
            cooccurrence: HashMap::new(),
        }
    }

    pub fn from_corpus(corpus: &Corpus, candidates: &CandidateVocabulary) -> Self {
        let mut lm = Self::uniform(corpus.vocab(), candidates);
        for doc in corpus.documents() {
            for sentence in &doc.sentences {
                let present: BTreeSet<TokenId> = sentence.tokens.iter().copied().collect();
                for t in &sentence.tokens {
                    if candidates.contains(*t) {
                        *lm.unigram.entry(*t).or_default() += 1;
                    }
                }
                for c in present.iter().filter(|c| candidates.contains(**c)) {
                    for t in present.iter().filter(|t| *t != c) {
                        *lm.cooccurrence
                            .entry(*t)
                            .or_default()
                            .entry(*c)
                            .or_default() += 1;
                    }
                }
            }
        }
        lm
    }
}

impl LanguageModel for ReferenceLm {
    fn predict(&self, query: &ClozeQuery) -> Result<TokenDistribution> {
        let context: BTreeSet<TokenId> = query
            .tokens
            .iter()
            .filter(|t| *t != MASK_TOKEN)
            .filter_map(|t| self.vocab.get(t))
            .collect();
        let weights = self.candidates.iter().map(|c| {
            let mut w = 1.0 + self.unigram.get(c).copied().unwrap_or(0) as f64;
            for t in &context {
                if let Some(row) = self.cooccurrence.get(t) {
                    w += row.get(c).copied().unwrap_or(0) as f64;
                }
            }
            (*c, w)
        });
        TokenDistribution::from_weights(weights)
    }
}

/// LM predictions computed elsewhere, keyed by query id.
///
/// JSON-lines rows `{"query_id": "...", "probs": [["token", p], ...]}`. Tokens are
/// normalized, restricted to the candidates and renormalized; unknown tokens are dropped.
#[derive(Debug, Clone)]
pub struct ImportedPredictions {
    table: HashMap<String, TokenDistribution>,
}

#[derive(Deserialize)]
struct PredictionRow {
    query_id: String,
    probs: Vec<(String, f64)>,
}

impl ImportedPredictions {
    pub fn load(path: &Path, vocab: &Vocabulary, candidates: &CandidateVocabulary) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut table = HashMap::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let what = format!("{} line {}", path.display(), n + 1);
            let row: PredictionRow =
                serde_json::from_str(&line).map_err(|e| Error::json(&what, e))?;
            let mut weights = Vec::new();
            for (surface, p) in &row.probs {
                if !p.is_finite() || *p < 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "{what}: probability {p} for {surface:?} is not a finite non-negative number"
                    )));
                }
                if let Some(id) = vocab.get(&normalize(surface)) {
                    if candidates.contains(id) {
                        weights.push((id, *p));
                    }
                }
            }
            let dist = TokenDistribution::from_weights(weights)?;
            if dist.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "{what}: no probability mass on candidate tokens for {:?}",
                    row.query_id
                )));
            }
            if table.insert(row.query_id.clone(), dist).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "{what}: duplicate query id {:?}",
                    row.query_id
                )));
            }
        }
        Ok(Self { table })
    }

    pub fn from_table(table: HashMap<String, TokenDistribution>) -> Self {
        Self { table }
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl LanguageModel for ImportedPredictions {
    fn predict(&self, query: &ClozeQuery) -> Result<TokenDistribution> {
        self.table
            .get(&query.id)
            .cloned()
            .ok_or_else(|| Error::MissingQuery(query.id.clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpolationConfig {
    pub lambda: f64,
}

impl Default for InterpolationConfig {
    fn default() -> Self {
        Self { lambda: 0.3 }
    }
}

impl InterpolationConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "lambda must be in [0, 1], got {lambda}"
        )))
    }
}

/// `lambda * p_knn + (1 - lambda) * p_lm`; an empty `p_knn` returns `p_lm` unchanged.
pub fn interpolate(
    p_knn: &TokenDistribution,
    p_lm: &TokenDistribution,
    lambda: f64,
) -> Result<TokenDistribution> {
    check_lambda(lambda)?;
    if p_knn.is_empty() {
        return Ok(p_lm.clone());
    }
    let tokens: BTreeSet<TokenId> = p_knn.iter().chain(p_lm.iter()).map(|(t, _)| t).collect();
    let probs = tokens
        .into_iter()
        .map(|t| (t, lambda * p_knn.get(t) + (1.0 - lambda) * p_lm.get(t)))
        .filter(|(_, p)| *p > 0.0)
        .collect();
    Ok(TokenDistribution::from_raw(probs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Lm,
    Knn,
    Interpolated,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lm" => Ok(Self::Lm),
            "knn" => Ok(Self::Knn),
            "interpolated" => Ok(Self::Interpolated),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode {other:?}; expected lm, knn or interpolated"
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Lm => "lm",
            Self::Knn => "knn",
            Self::Interpolated => "interpolated",
        })
    }
}

/// How query embeddings are obtained.
#[derive(Clone, Copy)]
pub enum QueryEncoder<'a> {
    Model(&'a dyn ContextEmbedder),
    /// Precomputed, looked up by query id.
    Imported(&'a ImportedQueryEmbeddings),
}

impl QueryEncoder<'_> {
    pub fn encode(&self, query: &ClozeQuery) -> Result<Vec<f32>> {
        match self {
            Self::Model(m) => Ok(embed_query(*m, &query.token_refs())?.into_values()),
            Self::Imported(table) => Ok(table.get(&query.id)?.values().to_vec()),
        }
    }
}

/// Where kNN candidates come from.
#[derive(Clone, Copy)]
pub enum Retrieval<'a> {
    /// Exact search over the records of the retrieved documents.
    Ir {
        index: &'a InvertedIndex,
        source: &'a dyn RecordSource,
        config: IrQueryConfig,
    },
    /// Approximate search over the whole store.
    Ann { index: &'a IvfIndex, n_probe: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnPrediction {
    /// Distribution restricted to the candidates; empty when nothing was retrieved.
    pub distribution: TokenDistribution,
    /// Retrieved documents, best first; `None` for whole-store search.
    pub documents: Option<Vec<u32>>,
    pub neighbors: Vec<Neighbor>,
}

/// Nearest neighbors of the query within the retrieval scope, nearest first.
pub fn knn_neighbors(
    query: &ClozeQuery,
    encoder: QueryEncoder<'_>,
    retrieval: Retrieval<'_>,
    k: usize,
) -> Result<(Option<Vec<u32>>, Vec<Neighbor>)> {
    match retrieval {
        Retrieval::Ir {
            index,
            source,
            config,
        } => {
            let docs = index.retrieve(query, &config);
            if docs.is_empty() {
                return Ok((Some(docs), Vec::new()));
            }
            let ranges = source.slice(&docs)?;
            let neighbors = knn(&encoder.encode(query)?, source, &ranges, k)?;
            Ok((Some(docs), neighbors))
        }
        Retrieval::Ann { index, n_probe } => {
            let neighbors = index.search(&encoder.encode(query)?, k, n_probe)?;
            Ok((None, neighbors))
        }
    }
}

pub fn knn_predict(
    query: &ClozeQuery,
    encoder: QueryEncoder<'_>,
    retrieval: Retrieval<'_>,
    config: &KnnConfig,
    candidates: &CandidateVocabulary,
) -> Result<KnnPrediction> {
    config.validate()?;
    let (documents, neighbors) = knn_neighbors(query, encoder, retrieval, config.k)?;
    Ok(KnnPrediction {
        distribution: knn_distribution(&neighbors, config.distance_scale, candidates),
        documents,
        neighbors,
    })
}

/// Neighbor distribution restricted to the candidates.
pub fn knn_distribution(
    neighbors: &[Neighbor],
    distance_scale: f64,
    candidates: &CandidateVocabulary,
) -> TokenDistribution {
    neighbors_to_distribution(neighbors, distance_scale).restrict(candidates.ids())
}

/// The distribution a mode ranks by. kNN mode falls back to the LM when kNN is empty.
pub fn combine(
    mode: Mode,
    p_knn: &TokenDistribution,
    p_lm: &TokenDistribution,
    lambda: f64,
) -> Result<TokenDistribution> {
    match mode {
        Mode::Lm => Ok(p_lm.clone()),
        Mode::Knn => interpolate(p_knn, p_lm, 1.0),
        Mode::Interpolated => interpolate(p_knn, p_lm, lambda),
    }
}

/// Everything needed to answer queries.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub lm: &'a dyn LanguageModel,
    pub candidates: &'a CandidateVocabulary,
    /// Required by the kNN and interpolated modes, with `retrieval`.
    pub encoder: Option<QueryEncoder<'a>>,
    pub retrieval: Option<Retrieval<'a>>,
    pub knn: KnnConfig,
    pub interpolation: InterpolationConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Answer {
    /// All candidates, best first.
    pub ranking: Vec<(TokenId, f64)>,
    pub distribution: TokenDistribution,
    pub lm: TokenDistribution,
    /// `None` in LM mode.
    pub knn: Option<KnnPrediction>,
}

impl Pipeline<'_> {
    pub fn validate(&self) -> Result<()> {
        self.knn.validate()?;
        self.interpolation.validate()
    }

    pub fn lm_predict(&self, query: &ClozeQuery) -> Result<TokenDistribution> {
        Ok(self.lm.predict(query)?.restrict(self.candidates.ids()))
    }

    pub fn knn_predict(&self, query: &ClozeQuery) -> Result<KnnPrediction> {
        let (Some(encoder), Some(retrieval)) = (self.encoder, self.retrieval) else {
            return Err(Error::InvalidArgument(
                "kNN prediction needs a query encoder and an IR or ANN index".into(),
            ));
        };
        knn_predict(query, encoder, retrieval, &self.knn, self.candidates)
    }

    /// Distribution for `mode`, with the LM and kNN parts it was built from.
    pub fn predict(&self, query: &ClozeQuery, mode: Mode) -> Result<Answer> {
        let lm = self.lm_predict(query)?;
        let knn = match mode {
            Mode::Lm => None,
            Mode::Knn | Mode::Interpolated => Some(self.knn_predict(query)?),
        };
        let empty = TokenDistribution::empty();
        let p_knn = knn.as_ref().map_or(&empty, |k| &k.distribution);
        let distribution = combine(mode, p_knn, &lm, self.interpolation.lambda)?;
        Ok(Answer {
            ranking: Vec::new(),
            distribution,
            lm,
            knn,
        })
    }

    /// [`Pipeline::predict`] plus the full candidate ranking.
    pub fn answer(&self, query: &ClozeQuery, mode: Mode) -> Result<Answer> {
        let mut answer = self.predict(query, mode)?;
        answer.ranking = rank_candidates(&answer.distribution, self.candidates);
        Ok(answer)
    }
}
