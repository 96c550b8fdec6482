//! Synthetic corpora, stores and fact datasets shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashSet;

use bknn::corpus::{Corpus, RawDocument};
use bknn::datastore::{MemoryStore, RecordMeta};
use bknn::embedder::ReferenceEmbedder;
use bknn::eval::{Dataset, DatasetRow};
use bknn::pipeline::CandidateVocabulary;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DIM: usize = 64;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Approximately standard normal (sum of twelve uniforms).
pub fn gauss(rng: &mut impl Rng) -> f32 {
    (0..12).map(|_| rng.random::<f32>()).sum::<f32>() - 6.0
}

/// Distinct lowercase pseudo-word for every index.
pub fn word(index: usize) -> String {
    const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    let mut n = index;
    let mut out = String::new();
    for _ in 0..3 {
        out.push_str(ONSETS[n % ONSETS.len()]);
        n /= ONSETS.len();
        out.push_str(VOWELS[n % VOWELS.len()]);
        n /= VOWELS.len();
    }
    out.push('x');
    out
}

/// Random keys grouped into `docs` documents with `per_doc` records each.
/// Every tenth record repeats the previous key to exercise distance ties.
pub fn random_store(docs: u32, per_doc: u16, dim: usize, vocab: u32, seed: u64) -> MemoryStore {
    let mut rng = rng(seed);
    let mut records: Vec<(RecordMeta, Vec<f32>)> = Vec::new();
    for doc_id in 0..docs {
        for token_index in 0..per_doc {
            let key = if records.len() % 10 == 9 {
                records.last().unwrap().1.clone()
            } else {
                (0..dim).map(|_| gauss(&mut rng)).collect()
            };
            let meta = RecordMeta {
                doc_id,
                sentence_index: 0,
                token_index,
                token_id: rng.random_range(0..vocab),
            };
            records.push((meta, key));
        }
    }
    MemoryStore::from_records(dim, records).unwrap()
}

/// Points drawn around `centers` Gaussian centers, one record per document.
pub fn clustered_store(n: usize, dim: usize, centers: usize, seed: u64) -> MemoryStore {
    let mut rng = rng(seed);
    let means: Vec<Vec<f32>> = (0..centers)
        .map(|_| (0..dim).map(|_| 4.0 * gauss(&mut rng)).collect())
        .collect();
    let records = (0..n)
        .map(|i| {
            let mean = &means[rng.random_range(0..centers)];
            let key = mean.iter().map(|m| m + gauss(&mut rng)).collect();
            let meta = RecordMeta {
                doc_id: i as u32,
                sentence_index: 0,
                token_index: 0,
                token_id: (i % 1000) as u32,
            };
            (meta, key)
        })
        .collect();
    MemoryStore::from_records(dim, records).unwrap()
}

/// Biographies with one verbatim statement per fact.
pub struct FactWorld {
    pub documents: Vec<RawDocument>,
    pub rows: Vec<DatasetRow>,
    /// Single-token answers of every relation.
    pub answers: Vec<String>,
}

pub const TEMPLATES: [(&str, &str); 3] = [
    ("born_in", "[X] was born in [Y] ."),
    ("died_in", "[X] died in [Y] ."),
    ("occupation", "[X] worked as a [Y] ."),
];

/// `subjects` people; cities and occupations are drawn from fixed pools.
///
/// Each subject document names its gold city/occupation once per relation and every
/// other pool word at most once, so the stated fact is the only exact-context match.
pub fn fact_world(subjects: usize, seed: u64) -> FactWorld {
    let mut rng = rng(seed);
    let cities: Vec<String> = (0..40).map(|i| word(10_000 + i)).collect();
    let jobs: Vec<String> = (0..20).map(|i| word(20_000 + i)).collect();
    let mut documents = Vec::new();
    let mut rows = Vec::new();
    for s in 0..subjects {
        let name = format!("{} {}", word(2 * s), word(2 * s + 1));
        let born = rng.random_range(0..cities.len());
        let died = (born + rng.random_range(1..cities.len())) % cities.len();
        let job = rng.random_range(0..jobs.len());
        let objects = [&cities[born], &cities[died], &jobs[job]];
        let mut text = String::new();
        for ((relation, template), object) in TEMPLATES.iter().zip(objects) {
            text.push_str(&template.replace("[X]", &name).replace("[Y]", object));
            text.push(' ');
            rows.push(DatasetRow::Triple {
                relation: relation.to_string(),
                subject: name.clone(),
                object: object.clone(),
                template: template.to_string(),
                query_id: Some(format!("{relation}:{s}")),
            });
        }
        text.push_str("little else is recorded about this person .");
        documents.push(RawDocument::new(name, text));
    }
    FactWorld {
        documents,
        rows,
        answers: cities.into_iter().chain(jobs).collect(),
    }
}

pub struct Built {
    pub corpus: Corpus,
    pub store: MemoryStore,
    pub embedder: ReferenceEmbedder,
    pub candidates: CandidateVocabulary,
    pub dataset: Dataset,
}

/// Ingest, embed in memory and prepare the dataset against the answer pool.
pub fn build_world(world: &FactWorld, dim: usize) -> Built {
    let corpus = Corpus::ingest(world.documents.clone()).unwrap();
    let embedder = ReferenceEmbedder::new(dim).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.bin");
    let store = bknn::datastore::build(&corpus, &embedder, &path)
        .unwrap()
        .load()
        .unwrap();
    let present = world
        .answers
        .iter()
        .filter(|a| corpus.vocab().get(a).is_some());
    let candidates = CandidateVocabulary::from_surfaces(present, corpus.vocab()).unwrap();
    let dataset =
        Dataset::prepare(&world.rows, corpus.vocab(), &candidates, &HashSet::new()).unwrap();
    assert_eq!(
        dataset.queries.len(),
        world.rows.len(),
        "{:?}",
        dataset.excluded
    );
    Built {
        corpus,
        store,
        embedder,
        candidates,
        dataset,
    }
}
