//! Independent recomputations of the library's numbers.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use bknn::ann::{IvfConfig, IvfIndex};
use bknn::datastore::{MemoryStore, RecordMeta, RecordRange, RecordSource};
use bknn::distribution::TokenDistribution;
use bknn::embedder::embed_query;
use bknn::ir::{InvertedIndex, IrQueryConfig};
use bknn::kmeans::{kmeans, KMeansConfig};
use bknn::knn::KnnConfig;
use bknn::knn::{knn, neighbors_to_distribution, Neighbor};
use bknn::pipeline::{
    ImportedPredictions, InterpolationConfig, Mode, Pipeline, QueryEncoder, ReferenceLm, Retrieval,
};
use bknn::query::ClozeQuery;
use num_bigint::BigInt;
use num_rational::BigRational;
use rand::Rng;

use common::*;

fn rational(x: f64) -> BigRational {
    BigRational::from_float(x).unwrap()
}

/// e^(-x) by its Taylor series, exact to far below f64 resolution for 0 <= x <= 16.
fn exp_neg(x: &BigRational) -> BigRational {
    let mut term = BigRational::from_integer(BigInt::from(1));
    let mut sum = term.clone();
    for n in 1..160 {
        term = -term * x / BigRational::from_integer(BigInt::from(n));
        sum += &term;
    }
    sum
}

fn to_f64(x: &BigRational) -> f64 {
    let scale = BigInt::from(10).pow(40);
    let scaled = x.numer() * &scale / x.denom();
    scaled.to_string().parse::<f64>().unwrap() / 1e40
}

fn neighbor(record: u64, token_id: u32, distance: f64) -> Neighbor {
    Neighbor {
        record,
        meta: RecordMeta {
            doc_id: 0,
            sentence_index: 0,
            token_index: record as u16,
            token_id,
        },
        distance,
    }
}

/// Exact softmax over `-d / l` summed per token.
fn softmax_oracle(neighbors: &[Neighbor], l: f64) -> BTreeMap<u32, f64> {
    let l = rational(l);
    let mut weights: BTreeMap<u32, BigRational> = BTreeMap::new();
    for n in neighbors {
        let w = exp_neg(&(rational(n.distance) / &l));
        *weights
            .entry(n.meta.token_id)
            .or_insert_with(|| BigRational::from_integer(BigInt::from(0))) += w;
    }
    let total: BigRational = weights.values().cloned().sum();
    weights
        .into_iter()
        .map(|(t, w)| (t, to_f64(&(w / &total))))
        .collect()
}

#[test]
fn two_neighbor_softmax_matches_exact_value() {
    let neighbors = [neighbor(0, 1, 0.0), neighbor(1, 2, 1.0)];
    let d = neighbors_to_distribution(&neighbors, 1.0);
    let oracle = softmax_oracle(&neighbors, 1.0);
    assert!((d.get(1) - 0.7311).abs() < 1e-4);
    assert!((d.get(2) - 0.2689).abs() < 1e-4);
    assert!((d.get(1) - oracle[&1]).abs() < 1e-12);
    assert!((d.get(2) - oracle[&2]).abs() < 1e-12);
}

#[test]
fn softmax_matches_exact_oracle_on_random_fixtures() {
    let mut rng = rng(11);
    for _ in 0..50 {
        let n = rng.random_range(1..12);
        let neighbors: Vec<Neighbor> = (0..n)
            .map(|i| {
                neighbor(
                    i,
                    rng.random_range(0..4),
                    rng.random_range(0..64) as f64 / 8.0,
                )
            })
            .collect();
        let l = [0.5, 1.0, 2.0, 6.0][rng.random_range(0..4)];
        let d = neighbors_to_distribution(&neighbors, l);
        let oracle = softmax_oracle(&neighbors, l);
        assert_eq!(d.len(), oracle.len());
        for (t, p) in oracle {
            assert!(
                (d.get(t) - p).abs() < 1e-12,
                "token {t}: {} vs {p}",
                d.get(t)
            );
        }
    }
}

/// All records of `ranges`, fully sorted by (distance, record id).
fn brute_force(
    query: &[f32],
    store: &MemoryStore,
    ranges: &[RecordRange],
    k: usize,
) -> Vec<(u64, f64)> {
    let mut all = Vec::new();
    for r in ranges {
        for id in r.start..r.end {
            let key = store.key(id).unwrap();
            let sq: f64 = query
                .iter()
                .zip(key)
                .map(|(a, b)| {
                    let d = *a as f64 - *b as f64;
                    d * d
                })
                .sum();
            all.push((id, sq.sqrt()));
        }
    }
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

#[test]
fn knn_matches_full_sort() {
    let store = random_store(40, 25, 16, 30, 3);
    let mut rng = rng(4);
    for _ in 0..30 {
        let docs: Vec<u32> = (0..40).filter(|_| rng.random_bool(0.3)).collect();
        let ranges = store.slice(&docs).unwrap();
        let query: Vec<f32> = (0..16).map(|_| gauss(&mut rng)).collect();
        for k in [1, 8, 128] {
            let got: Vec<(u64, f64)> = knn(&query, &store, &ranges, k)
                .unwrap()
                .iter()
                .map(|n| (n.record, n.distance))
                .collect();
            assert_eq!(got, brute_force(&query, &store, &ranges, k));
        }
    }
}

#[test]
fn ir_scores_match_independent_recomputation() {
    let world = fact_world(30, 5);
    let corpus = bknn::corpus::Corpus::ingest(world.documents.clone()).unwrap();
    let index = InvertedIndex::build(&corpus);

    // term -> doc -> tf, terms as plain strings
    let mut tf: HashMap<String, BTreeMap<u32, u32>> = HashMap::new();
    for doc in corpus.documents() {
        for s in 0..doc.sentences.len() {
            let toks = corpus.sentence_surfaces(doc.doc_id, s).unwrap();
            let mut terms: Vec<String> = toks.iter().map(|t| t.to_string()).collect();
            terms.extend(toks.windows(2).map(|w| format!("{}\u{1}{}", w[0], w[1])));
            for t in terms {
                *tf.entry(t).or_default().entry(doc.doc_id).or_default() += 1;
            }
        }
    }
    let n = corpus.len() as f64;
    let idf = |df: usize| ((n - df as f64 + 0.5) / (df as f64 + 0.5)).ln().max(0.0);
    let mut norm = vec![0f64; corpus.len()];
    for docs in tf.values() {
        for (d, c) in docs {
            let w = (1.0 + (*c as f64).ln()) * idf(docs.len());
            norm[*d as usize] += w * w;
        }
    }
    let norm: Vec<f64> = norm.into_iter().map(f64::sqrt).collect();

    let queries = [
        "was born in [MASK] .",
        "worked as a [MASK] .",
        &format!("{} was born in [MASK] .", word(4)),
        &format!("{} {} died in [MASK] .", word(6), word(9)),
    ];
    for text in queries {
        let q = ClozeQuery::parse("q", text).unwrap();
        let toks: Vec<&str> = q
            .tokens
            .iter()
            .map(String::as_str)
            .filter(|t| *t != "[mask]")
            .collect();
        let mut terms: BTreeSet<String> = toks.iter().map(|t| t.to_string()).collect();
        terms.extend(toks.windows(2).map(|w| format!("{}\u{1}{}", w[0], w[1])));
        let mut expected: BTreeMap<u32, f64> = BTreeMap::new();
        for t in &terms {
            let Some(docs) = tf.get(t) else { continue };
            let idf = idf(docs.len());
            for (d, c) in docs {
                *expected.entry(*d).or_default() +=
                    (1.0 + (*c as f64).ln()) * idf * idf / norm[*d as usize];
            }
        }
        expected.retain(|_, s| *s > 0.0);
        let got = index.score(&bknn::ir::build_ir_query(&q));
        assert_eq!(got.len(), expected.len(), "{text}");
        for (d, s) in &got {
            assert!(
                (s - expected[d]).abs() <= 1e-12 * expected[d].max(1.0),
                "{text} doc {d}"
            );
        }
        let config = IrQueryConfig {
            top_n: 3,
            use_subject_shortcut: true,
        };
        let top: Vec<u32> = got.iter().take(3).map(|x| x.0).collect();
        assert_eq!(index.retrieve(&q, &config), top);
    }
}

#[test]
fn pipeline_matches_componentwise_composition() {
    let world = fact_world(50, 6);
    let built = build_world(&world, DIM);
    let index = InvertedIndex::build(&built.corpus);
    let lm = ReferenceLm::from_corpus(&built.corpus, &built.candidates);
    let ir = IrQueryConfig::default();
    let knn_config = KnnConfig {
        k: 16,
        distance_scale: 0.5,
    };
    let lambda = 0.3;
    let pipeline = Pipeline {
        lm: &lm,
        candidates: &built.candidates,
        encoder: Some(QueryEncoder::Model(&built.embedder)),
        retrieval: Some(Retrieval::Ir {
            index: &index,
            source: &built.store,
            config: ir,
        }),
        knn: knn_config,
        interpolation: InterpolationConfig { lambda },
    };
    let cands = built.candidates.ids();
    for (i, q) in built.dataset.queries.iter().enumerate() {
        // Drop the subject on odd queries so plain top-N retrieval is covered too.
        let query = if i % 2 == 1 {
            ClozeQuery {
                subject: None,
                ..q.query.clone()
            }
        } else {
            q.query.clone()
        };
        let docs = index.retrieve(&query, &ir);
        let ranges = built.store.slice(&docs).unwrap();
        let key = embed_query(&built.embedder, &query.token_refs()).unwrap();
        let nearest = brute_force(key.values(), &built.store, &ranges, knn_config.k);
        let mut w: BTreeMap<u32, f64> = BTreeMap::new();
        for (id, d) in &nearest {
            let t = built.store.meta(*id).unwrap().token_id;
            if cands.contains(&t) {
                *w.entry(t).or_default() += (-d / knn_config.distance_scale).exp();
            }
        }
        let z: f64 = w.values().sum();
        let p_lm = lm.predict(&query).unwrap();
        let mut expected: Vec<(u32, f64)> = cands
            .iter()
            .map(|t| {
                let knn = if z > 0.0 {
                    w.get(t).copied().unwrap_or(0.0) / z
                } else {
                    0.0
                };
                let p = if z > 0.0 {
                    lambda * knn + (1.0 - lambda) * p_lm.get(*t)
                } else {
                    p_lm.get(*t)
                };
                (*t, p)
            })
            .collect();
        let answer = pipeline.answer(&query, Mode::Interpolated).unwrap();
        for (t, p) in &expected {
            assert!(
                (answer.distribution.get(*t) - p).abs() < 1e-12,
                "query {i} token {t}"
            );
        }
        expected.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let got: Vec<u32> = answer.ranking.iter().map(|x| x.0).collect();
        let want: Vec<u32> = expected.iter().map(|x| x.0).collect();
        // Orders may only differ between entries within rounding of each other.
        for (a, b) in got.iter().zip(&want) {
            if a != b {
                assert!((answer.distribution.get(*a) - answer.distribution.get(*b)).abs() < 1e-12);
            }
        }
    }
}

use bknn::pipeline::LanguageModel;

#[test]
fn answer_argmax_follows_interpolated_mass() {
    let world = fact_world(40, 7);
    let built = build_world(&world, DIM);
    let index = InvertedIndex::build(&built.corpus);
    let mut rng = rng(8);
    let ids: Vec<u32> = built.candidates.ids().iter().copied().collect();
    let table: HashMap<String, TokenDistribution> = built
        .dataset
        .queries
        .iter()
        .map(|q| {
            let w: Vec<(u32, f64)> = ids
                .iter()
                .map(|t| (*t, rng.random::<f64>().powi(4)))
                .collect();
            (
                q.query.id.clone(),
                TokenDistribution::from_weights(w).unwrap(),
            )
        })
        .collect();
    let lm = ImportedPredictions::from_table(table);
    let pipeline = Pipeline {
        lm: &lm,
        candidates: &built.candidates,
        encoder: Some(QueryEncoder::Model(&built.embedder)),
        retrieval: Some(Retrieval::Ir {
            index: &index,
            source: &built.store,
            config: IrQueryConfig::default(),
        }),
        knn: KnnConfig::default(),
        interpolation: InterpolationConfig { lambda: 0.3 },
    };
    let mut gold_first = 0;
    for q in &built.dataset.queries {
        let a = pipeline.answer(&q.query, Mode::Interpolated).unwrap();
        let knn = &a.knn.as_ref().unwrap().distribution;
        let mix = |t: u32| 0.3 * knn.get(t) + 0.7 * a.lm.get(t);
        let beats = ids.iter().all(|t| *t == q.gold || mix(q.gold) > mix(*t));
        if a.ranking[0].0 == q.gold {
            gold_first += 1;
            assert!(ids.iter().all(|t| mix(q.gold) >= mix(*t) - 1e-15));
        }
        if beats {
            assert_eq!(a.ranking[0].0, q.gold);
        }
    }
    assert!(gold_first > 0);
}

fn ivf(store: &MemoryStore, config: IvfConfig) -> IvfIndex {
    let mut index = IvfIndex::train(store, &config).unwrap();
    index.populate(store).unwrap();
    index
}

#[test]
fn pq_reconstruction_is_within_recorded_error() {
    let store = clustered_store(3000, 32, 20, 9);
    let index = ivf(
        &store,
        IvfConfig {
            n_clusters: 16,
            n_probe: 4,
            training_sample: 3000,
            pq_enabled: true,
            pq_subquantizers: 8,
            pq_bits: 8,
            seed: 1,
        },
    );
    let pq = index.pq().unwrap();
    let s = pq.sub_dim();
    for c in 0..index.n_clusters() {
        for (pos, id) in index.list_records(c).iter().enumerate() {
            let key = store.key(*id).unwrap();
            let residual: Vec<f32> = key
                .iter()
                .zip(index.centroid(c))
                .map(|(k, m)| k - m)
                .collect();
            let code = index.code(c, pos).unwrap();
            assert_eq!(code, pq.encode(&residual).as_slice());
            let decoded = pq.decode(code);
            for j in 0..pq.m {
                let err: f64 = (j * s..(j + 1) * s)
                    .map(|i| (residual[i] as f64 - decoded[i] as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(
                    err <= pq.max_error[j] + 1e-9,
                    "list {c} entry {pos} sub {j}: {err} > {}",
                    pq.max_error[j]
                );
            }
        }
    }
}

#[test]
fn kmeans_inertia_never_increases() {
    let store = clustered_store(2000, 16, 12, 10);
    let points: Vec<f32> = (0..2000)
        .flat_map(|i| store.key(i).unwrap().to_vec())
        .collect();
    for seed in 0..5 {
        let km = kmeans(&points, 16, &KMeansConfig::new(24, seed)).unwrap();
        assert!(!km.inertia_log.is_empty());
        for w in km.inertia_log.windows(2) {
            assert!(
                w[1] <= w[0] * (1.0 + 1e-12),
                "seed {seed}: {:?}",
                km.inertia_log
            );
        }
    }
}

#[test]
fn ivf_partitions_every_record_to_its_nearest_centroid() {
    let base = clustered_store(2000, 16, 10, 12);
    let config = IvfConfig {
        n_clusters: 32,
        n_probe: 4,
        training_sample: 1000,
        ..IvfConfig::default()
    };
    let trained = IvfIndex::train(&base, &config).unwrap();
    // Append one record per centroid with the centroid itself as key.
    let mut records: Vec<(RecordMeta, Vec<f32>)> = (0..2000)
        .map(|i| (base.meta(i).unwrap(), base.key(i).unwrap().to_vec()))
        .collect();
    for c in 0..trained.n_clusters() {
        let meta = RecordMeta {
            doc_id: 2000 + c as u32,
            sentence_index: 0,
            token_index: 0,
            token_id: 0,
        };
        records.push((meta, trained.centroid(c).to_vec()));
    }
    let store = MemoryStore::from_records(16, records).unwrap();
    let mut index = trained.clone();
    index.populate(&store).unwrap();

    let mut seen = vec![false; store.record_count() as usize];
    for c in 0..index.n_clusters() {
        for id in index.list_records(c) {
            assert!(!seen[*id as usize], "record {id} in two lists");
            seen[*id as usize] = true;
            let (nearest, _) = bknn::kmeans::nearest(
                &(0..index.n_clusters())
                    .flat_map(|i| index.centroid(i).to_vec())
                    .collect::<Vec<_>>(),
                16,
                store.key(*id).unwrap(),
            );
            assert_eq!(nearest, c);
        }
    }
    assert!(seen.iter().all(|s| *s));
    for c in 0..index.n_clusters() {
        assert!(index.list_records(c).contains(&(2000 + c as u64)));
    }
}

/// Mean fraction of the exact top 10 found by the index.
fn recall_at_10(
    index: &IvfIndex,
    store: &MemoryStore,
    queries: &[Vec<f32>],
    n_probe: usize,
) -> f64 {
    let full = store.full_range();
    let mut total = 0.0;
    for q in queries {
        let exact: BTreeSet<u64> = knn(q, store, &full, 10)
            .unwrap()
            .iter()
            .map(|n| n.record)
            .collect();
        let got = index.search(q, 10, n_probe).unwrap();
        total += got.iter().filter(|n| exact.contains(&n.record)).count() as f64 / 10.0;
    }
    total / queries.len() as f64
}

#[test]
fn ivf_recall_at_a_quarter_of_the_clusters() {
    let store = clustered_store(5000, 32, 40, 13);
    let index = ivf(
        &store,
        IvfConfig {
            n_clusters: 64,
            training_sample: 5000,
            ..IvfConfig::default()
        },
    );
    let mut rng = rng(14);
    let queries: Vec<Vec<f32>> = (0..100)
        .map(|_| {
            let base = store.key(rng.random_range(0..5000)).unwrap();
            base.iter().map(|x| x + 0.5 * gauss(&mut rng)).collect()
        })
        .collect();
    let recall = recall_at_10(&index, &store, &queries, 16);
    // Measured 1.000 on this fixture.
    assert!(recall >= 0.9, "recall {recall}");
    assert_eq!(recall_at_10(&index, &store, &queries, 64), 1.0);
}
