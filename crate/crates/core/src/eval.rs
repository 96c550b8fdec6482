//! Fact datasets, precision-at-rank metrics, mode evaluation and hyperparameter search.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, TokenId, Vocabulary};
use crate::distribution::TokenDistribution;
use crate::error::{Error, Result};
use crate::ir::IrQueryConfig;
use crate::knn::{KnnConfig, Neighbor};
use crate::pipeline::{
    gold_rank, interpolate, knn_distribution, knn_neighbors, rank_candidates, CandidateVocabulary,
    Mode, Pipeline, Retrieval,
};
use crate::query::ClozeQuery;

pub const RANKS: [usize; 3] = [1, 5, 10];

/// A subject-relation-object fact with a statement template over `X` and `Y`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactTriple {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub template: String,
}

/// Placeholder `name` as `[name]`, or else as a standalone word.
fn placeholder_spans(template: &str, name: char) -> Vec<(usize, usize)> {
    let bracketed = format!("[{name}]");
    let spans: Vec<(usize, usize)> = template
        .match_indices(&bracketed)
        .map(|(i, s)| (i, i + s.len()))
        .collect();
    if !spans.is_empty() {
        return spans;
    }
    let is_word = |c: Option<char>| c.is_some_and(|c| c.is_alphanumeric() || c == '_');
    template
        .char_indices()
        .filter(|(i, c)| {
            *c == name
                && !is_word(template[..*i].chars().next_back())
                && !is_word(template[i + 1..].chars().next())
        })
        .map(|(i, _)| (i, i + 1))
        .collect()
}

/// Substitute the subject for `X` and the mask for `Y`.
pub fn instantiate(fact: &FactTriple, query_id: impl Into<String>) -> Result<ClozeQuery> {
    let x = placeholder_spans(&fact.template, 'X');
    let y = placeholder_spans(&fact.template, 'Y');
    if x.len() != 1 || y.len() != 1 {
        return Err(Error::InvalidQuery(format!(
            "template {:?} must contain X and Y exactly once",
            fact.template
        )));
    }
    let mut spans = [(x[0], fact.subject.as_str()), (y[0], "[MASK]")];
    spans.sort_by_key(|((start, _), _)| *start);
    let mut text = String::new();
    let mut at = 0;
    for ((start, end), with) in spans {
        text.push_str(&fact.template[at..start]);
        text.push_str(with);
        at = end;
    }
    text.push_str(&fact.template[at..]);
    Ok(ClozeQuery::parse(query_id, &text)?
        .with_subject(&fact.subject)
        .with_relation(fact.relation.clone())
        .with_gold(&fact.object))
}

/// A dataset line: a fact triple or an already instantiated query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetRow {
    Triple {
        relation: String,
        subject: String,
        object: String,
        template: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        query_id: Option<String>,
    },
    Instantiated {
        query_id: String,
        masked_text: String,
        answer: String,
        relation: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        subject: Option<String>,
    },
}

/// Read a JSON-lines dataset. Triples without an id get `relation:line`.
pub fn read_dataset_jsonl(path: &Path) -> Result<Vec<DatasetRow>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut row: DatasetRow = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{} line {}", path.display(), n + 1), e))?;
        if let DatasetRow::Triple {
            relation, query_id, ..
        } = &mut row
        {
            query_id.get_or_insert_with(|| format!("{relation}:{}", n + 1));
        }
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalQuery {
    pub query: ClozeQuery,
    pub gold: TokenId,
}

impl EvalQuery {
    pub fn relation(&self) -> &str {
        self.query.relation.as_deref().unwrap_or("")
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub queries: Vec<EvalQuery>,
    /// Dropped rows by reason.
    pub excluded: BTreeMap<String, usize>,
}

impl Dataset {
    /// Instantiate rows and keep those with a single-token candidate answer.
    ///
    /// Rows whose id is in `exclude_ids` (the dev split) are dropped and counted.
    pub fn prepare(
        rows: &[DatasetRow],
        vocab: &Vocabulary,
        candidates: &CandidateVocabulary,
        exclude_ids: &HashSet<String>,
    ) -> Result<Self> {
        let mut out = Self::default();
        let mut seen = HashSet::new();
        for (i, row) in rows.iter().enumerate() {
            let query = match row {
                DatasetRow::Triple {
                    relation,
                    subject,
                    object,
                    template,
                    query_id,
                } => {
                    let fact = FactTriple {
                        subject: subject.clone(),
                        relation: relation.clone(),
                        object: object.clone(),
                        template: template.clone(),
                    };
                    let id = query_id
                        .clone()
                        .unwrap_or_else(|| format!("{relation}:{}", i + 1));
                    instantiate(&fact, id)?
                }
                DatasetRow::Instantiated {
                    query_id,
                    masked_text,
                    answer,
                    relation,
                    subject,
                } => {
                    let q = ClozeQuery::parse(query_id.clone(), masked_text)?
                        .with_relation(relation.clone())
                        .with_gold(answer);
                    match subject {
                        Some(s) => q.with_subject(s),
                        None => q,
                    }
                }
            };
            if !seen.insert(query.id.clone()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate query id {:?} in dataset",
                    query.id
                )));
            }
            let reason = if exclude_ids.contains(&query.id) {
                Some("dev_overlap")
            } else {
                let gold = query.gold.as_deref().unwrap_or("");
                if tokenize(gold).len() != 1 {
                    Some("multi_token_answer")
                } else {
                    match vocab.get(gold) {
                        Some(id) if candidates.contains(id) => {
                            out.queries.push(EvalQuery { query, gold: id });
                            None
                        }
                        _ => Some("answer_not_in_candidates"),
                    }
                }
            };
            if let Some(reason) = reason {
                *out.excluded.entry(reason.to_string()).or_default() += 1;
            }
        }
        Ok(out)
    }
}

/// 1 if `gold` is among the first `r` entries of `ranking`.
pub fn precision_at(ranking: &[TokenId], gold: TokenId, r: usize) -> u8 {
    ranking.iter().take(r).any(|t| *t == gold) as u8
}

/// Mean within each relation, then mean over relations.
pub fn mean_precision<'a, I>(hits: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a str, bool)>,
{
    let mut groups: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for (relation, hit) in hits {
        let g = groups.entry(relation).or_default();
        g.0 += hit as u64;
        g.1 += 1;
    }
    if groups.is_empty() {
        return Err(Error::InvalidArgument("no queries to average".into()));
    }
    let sum: f64 = groups.values().map(|(h, n)| *h as f64 / *n as f64).sum();
    Ok(sum / groups.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionAt {
    pub p_at_1: f64,
    pub p_at_5: f64,
    pub p_at_10: f64,
}

impl PrecisionAt {
    fn values(&self) -> [f64; 3] {
        [self.p_at_1, self.p_at_5, self.p_at_10]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationScores {
    pub queries: usize,
    #[serde(flatten)]
    pub precision: PrecisionAt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub mode: Mode,
    pub ir_enabled: bool,
    pub lambda: f64,
    pub k: usize,
    pub distance_scale: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_probe: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub relations: BTreeMap<String, RelationScores>,
    /// Mean over relations; `None` when no query was evaluated.
    pub mean: Option<PrecisionAt>,
    pub evaluated: usize,
    pub failed: usize,
    pub excluded: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query_id: String,
    pub relation: String,
    pub gold: String,
    /// Zero-based rank of the gold answer.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    pub top: Vec<(String, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub settings: EvalSettings,
    pub metrics: EvalMetrics,
    pub queries: Vec<QueryOutcome>,
}

impl EvalReport {
    /// Same metrics and per-query outcomes, whatever the settings.
    pub fn same_results(&self, other: &Self) -> bool {
        self.metrics == other.metrics && self.queries == other.queries
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn text_table(&self) -> String {
        let mut out = String::new();
        let s = &self.settings;
        let ir = if s.ir_enabled { "ir" } else { "no-ir" };
        let _ = writeln!(
            out,
            "mode {} ({ir}), {} queries",
            s.mode, self.metrics.evaluated
        );
        let width = self
            .metrics
            .relations
            .keys()
            .map(String::len)
            .max()
            .unwrap_or(0)
            .max(8);
        let _ = writeln!(
            out,
            "{:<width$} {:>6} {:>6} {:>6} {:>6}",
            "relation", "n", "P@1", "P@5", "P@10"
        );
        for (name, r) in &self.metrics.relations {
            let [a, b, c] = r.precision.values();
            let _ = writeln!(
                out,
                "{name:<width$} {:>6} {:>6.1} {:>6.1} {:>6.1}",
                r.queries,
                100.0 * a,
                100.0 * b,
                100.0 * c
            );
        }
        if let Some(m) = &self.metrics.mean {
            let [a, b, c] = m.values();
            let _ = writeln!(
                out,
                "{:<width$} {:>6} {:>6.1} {:>6.1} {:>6.1}",
                "mean",
                self.metrics.evaluated,
                100.0 * a,
                100.0 * b,
                100.0 * c
            );
        }
        if self.metrics.failed > 0 {
            let _ = writeln!(out, "failed: {}", self.metrics.failed);
        }
        for (reason, n) in &self.metrics.excluded {
            let _ = writeln!(out, "excluded ({reason}): {n}");
        }
        out
    }
}

fn metrics_from_ranks(
    ranks: &[(String, Option<usize>)],
    failed: usize,
    excluded: BTreeMap<String, usize>,
) -> Result<EvalMetrics> {
    let ok: Vec<(&str, usize)> = ranks
        .iter()
        .filter_map(|(rel, rank)| rank.map(|r| (rel.as_str(), r)))
        .collect();
    let mut grouped: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (rel, r) in &ok {
        grouped.entry(rel).or_default().push(*r);
    }
    let relations = grouped
        .into_iter()
        .map(|(rel, rs)| {
            let at = |cut: usize| rs.iter().filter(|r| **r < cut).count() as f64 / rs.len() as f64;
            (
                rel.to_string(),
                RelationScores {
                    queries: rs.len(),
                    precision: PrecisionAt {
                        p_at_1: at(RANKS[0]),
                        p_at_5: at(RANKS[1]),
                        p_at_10: at(RANKS[2]),
                    },
                },
            )
        })
        .collect();
    let mean = if ok.is_empty() {
        None
    } else {
        let at = |cut: usize| mean_precision(ok.iter().map(|(rel, r)| (*rel, *r < cut)));
        Some(PrecisionAt {
            p_at_1: at(RANKS[0])?,
            p_at_5: at(RANKS[1])?,
            p_at_10: at(RANKS[2])?,
        })
    };
    Ok(EvalMetrics {
        relations,
        mean,
        evaluated: ok.len(),
        failed,
        excluded,
    })
}

fn surface(vocab: &Vocabulary, id: TokenId) -> String {
    vocab.surface(id).unwrap_or("").to_string()
}

/// Answer every query in `mode` and score the rankings.
///
/// Per-query failures are recorded in the report and left out of the metrics.
pub fn evaluate(
    dataset: &Dataset,
    pipeline: &Pipeline<'_>,
    vocab: &Vocabulary,
    mode: Mode,
) -> Result<EvalReport> {
    pipeline.validate()?;
    let outcomes: Vec<QueryOutcome> = dataset
        .queries
        .par_iter()
        .map(|q| {
            let base = QueryOutcome {
                query_id: q.query.id.clone(),
                relation: q.relation().to_string(),
                gold: surface(vocab, q.gold),
                rank: None,
                top: Vec::new(),
                error: None,
            };
            match pipeline.predict(&q.query, mode) {
                Ok(answer) => {
                    let top = rank_candidates(&answer.distribution, pipeline.candidates)
                        .into_iter()
                        .take(RANKS[2])
                        .map(|(t, p)| (surface(vocab, t), p))
                        .collect();
                    QueryOutcome {
                        rank: gold_rank(&answer.distribution, pipeline.candidates, q.gold),
                        top,
                        ..base
                    }
                }
                Err(e) => QueryOutcome {
                    error: Some(e.to_string()),
                    ..base
                },
            }
        })
        .collect();
    let ranks: Vec<(String, Option<usize>)> = outcomes
        .iter()
        .map(|o| (o.relation.clone(), o.rank))
        .collect();
    let failed = outcomes.iter().filter(|o| o.error.is_some()).count();
    let metrics = metrics_from_ranks(&ranks, failed, dataset.excluded.clone())?;
    let (ir_enabled, top_n, n_probe) = match pipeline.retrieval {
        Some(Retrieval::Ir { config, .. }) => (true, Some(config.top_n), None),
        Some(Retrieval::Ann { n_probe, .. }) => (false, None, Some(n_probe)),
        None => (false, None, None),
    };
    Ok(EvalReport {
        settings: EvalSettings {
            mode,
            ir_enabled,
            lambda: pipeline.interpolation.lambda,
            k: pipeline.knn.k,
            distance_scale: pipeline.knn.distance_scale,
            top_n,
            n_probe,
        },
        metrics,
        queries: outcomes,
    })
}

/// Hyperparameter grid over retrieved documents, lambda, k and distance scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub top_n: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub ks: Vec<usize>,
    pub distance_scales: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            top_n: (1..=5).collect(),
            lambdas: (2..=8).map(|i| i as f64 / 10.0).collect(),
            ks: vec![64, 128, 512],
            distance_scales: (5..=12).map(|l| l as f64).collect(),
        }
    }
}

impl GridSpec {
    pub fn cardinality(&self) -> usize {
        self.top_n.len() * self.lambdas.len() * self.ks.len() * self.distance_scales.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cardinality() == 0 {
            return Err(Error::InvalidArgument("grid is empty".into()));
        }
        for n in &self.top_n {
            IrQueryConfig {
                top_n: *n,
                use_subject_shortcut: true,
            }
            .validate()?;
        }
        for k in &self.ks {
            for l in &self.distance_scales {
                KnnConfig {
                    k: *k,
                    distance_scale: *l,
                }
                .validate()?;
            }
        }
        for lambda in &self.lambdas {
            crate::pipeline::InterpolationConfig { lambda: *lambda }.validate()?;
        }
        Ok(())
    }

    /// Cells in (N, lambda, k, l) nesting order.
    pub fn cells(&self) -> Vec<GridPoint> {
        let mut out = Vec::with_capacity(self.cardinality());
        for &top_n in &self.top_n {
            for &lambda in &self.lambdas {
                for &k in &self.ks {
                    for &distance_scale in &self.distance_scales {
                        out.push(GridPoint {
                            top_n,
                            lambda,
                            k,
                            distance_scale,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub top_n: usize,
    pub lambda: f64,
    pub k: usize,
    pub distance_scale: f64,
}

impl GridPoint {
    /// Preference among equal scores: smaller N, smaller k, lambda nearer 0.5, smaller l,
    /// then smaller lambda.
    fn preference(&self, other: &Self) -> std::cmp::Ordering {
        let gap = |l: f64| ((l - 0.5).abs() * 1e9).round() as i64;
        self.top_n
            .cmp(&other.top_n)
            .then(self.k.cmp(&other.k))
            .then(gap(self.lambda).cmp(&gap(other.lambda)))
            .then(self.distance_scale.total_cmp(&other.distance_scale))
            .then(self.lambda.total_cmp(&other.lambda))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    #[serde(flatten)]
    pub point: GridPoint,
    #[serde(flatten)]
    pub precision: PrecisionAt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub spec: GridSpec,
    pub best: GridCell,
    pub evaluated: usize,
    pub failed: usize,
    pub cells: Vec<GridCell>,
}

impl GridResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("grid result serializes")
    }
}

/// Per-query rank of the gold answer in every cell, or the error that stopped it.
fn grid_ranks(
    q: &EvalQuery,
    pipeline: &Pipeline<'_>,
    spec: &GridSpec,
    base_ir: IrQueryConfig,
) -> Result<Vec<Option<usize>>> {
    let (Some(encoder), Some(Retrieval::Ir { index, source, .. })) =
        (pipeline.encoder, pipeline.retrieval)
    else {
        unreachable!("checked by grid_search");
    };
    let k_max = *spec.ks.iter().max().expect("validated non-empty");
    let lm = pipeline.lm_predict(&q.query)?;
    let mut by_docs: HashMap<Vec<u32>, Vec<Neighbor>> = HashMap::new();
    let mut ranks = Vec::with_capacity(spec.cardinality());
    let mut per_n: Vec<Vec<Neighbor>> = Vec::with_capacity(spec.top_n.len());
    for &top_n in &spec.top_n {
        let config = IrQueryConfig { top_n, ..base_ir };
        let docs = index.retrieve(&q.query, &config);
        let neighbors = match by_docs.get(&docs) {
            Some(n) => n.clone(),
            None => {
                let retrieval = Retrieval::Ir {
                    index,
                    source,
                    config,
                };
                let (_, n) = knn_neighbors(&q.query, encoder, retrieval, k_max)?;
                by_docs.insert(docs, n.clone());
                n
            }
        };
        per_n.push(neighbors);
    }
    for neighbors in &per_n {
        // Distributions depend on (k, l) only; lambda varies fastest among cheap steps.
        let mut dists: BTreeMap<(usize, usize), TokenDistribution> = BTreeMap::new();
        for (ki, &k) in spec.ks.iter().enumerate() {
            for (li, &l) in spec.distance_scales.iter().enumerate() {
                let top = &neighbors[..k.min(neighbors.len())];
                dists.insert((ki, li), knn_distribution(top, l, pipeline.candidates));
            }
        }
        for &lambda in &spec.lambdas {
            for ki in 0..spec.ks.len() {
                for li in 0..spec.distance_scales.len() {
                    let mixed = interpolate(&dists[&(ki, li)], &lm, lambda)?;
                    ranks.push(gold_rank(&mixed, pipeline.candidates, q.gold));
                }
            }
        }
    }
    Ok(ranks)
}

/// Evaluate interpolated mode at every grid cell and pick the best mean P@1.
///
/// Retrieval runs once per N and the kNN search once per retrieved set at the largest
/// k; smaller k reuse the nearest prefix. Results equal a per-cell [`evaluate`].
pub fn grid_search(
    dataset: &Dataset,
    pipeline: &Pipeline<'_>,
    spec: &GridSpec,
) -> Result<GridResult> {
    spec.validate()?;
    if dataset.queries.is_empty() {
        return Err(Error::InvalidArgument(
            "grid search needs a non-empty dev set".into(),
        ));
    }
    let base_ir = match (pipeline.encoder, pipeline.retrieval) {
        (Some(_), Some(Retrieval::Ir { config, .. })) => config,
        _ => {
            return Err(Error::InvalidArgument(
                "grid search varies retrieved documents and needs an IR index".into(),
            ))
        }
    };
    let per_query: Vec<Result<Vec<Option<usize>>>> = dataset
        .queries
        .par_iter()
        .map(|q| grid_ranks(q, pipeline, spec, base_ir))
        .collect();
    let failed = per_query.iter().filter(|r| r.is_err()).count();
    let ok: Vec<(&str, &Vec<Option<usize>>)> = dataset
        .queries
        .iter()
        .zip(&per_query)
        .filter_map(|(q, r)| r.as_ref().ok().map(|ranks| (q.relation(), ranks)))
        .collect();
    if ok.is_empty() {
        return Err(Error::InvalidArgument("every dev query failed".into()));
    }
    let points = spec.cells();
    let mut cells = Vec::with_capacity(points.len());
    for (c, point) in points.into_iter().enumerate() {
        let at = |cut: usize| {
            mean_precision(
                ok.iter()
                    .map(|(rel, ranks)| (*rel, ranks[c].is_some_and(|r| r < cut))),
            )
        };
        cells.push(GridCell {
            point,
            precision: PrecisionAt {
                p_at_1: at(RANKS[0])?,
                p_at_5: at(RANKS[1])?,
                p_at_10: at(RANKS[2])?,
            },
        });
    }
    let best = cells
        .iter()
        .min_by(|a, b| {
            b.precision
                .p_at_1
                .total_cmp(&a.precision.p_at_1)
                .then(a.point.preference(&b.point))
        })
        .expect("grid is non-empty")
        .clone();
    Ok(GridResult {
        spec: spec.clone(),
        best,
        evaluated: ok.len(),
        failed,
        cells,
    })
}

/// Query ids of a dataset, for keeping dev queries out of a test run.
pub fn dataset_ids(rows: &[DatasetRow]) -> Result<BTreeSet<String>> {
    rows.iter()
        .map(|row| match row {
            DatasetRow::Triple { query_id, .. } => query_id
                .clone()
                .ok_or_else(|| Error::InvalidArgument("triple without a query id".into())),
            DatasetRow::Instantiated { query_id, .. } => Ok(query_id.clone()),
        })
        .collect()
}
