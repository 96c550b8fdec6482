//! Invariants checked over generated inputs.

use std::collections::{BTreeSet, HashMap};

use bknn::binio::{seal, unseal};
use bknn::corpus::{Corpus, RawDocument};
use bknn::datastore::RecordMeta;
use bknn::distribution::TokenDistribution;
use bknn::eval::{mean_precision, precision_at};
use bknn::knn::{neighbors_to_distribution, Neighbor};
use bknn::pipeline::{gold_rank, interpolate, rank_candidates, CandidateVocabulary};
use bknn::Error;
use proptest::prelude::*;

fn neighbor(record: u64, token_id: u32, distance: f64) -> Neighbor {
    Neighbor {
        record,
        meta: RecordMeta {
            doc_id: 0,
            sentence_index: 0,
            token_index: 0,
            token_id,
        },
        distance,
    }
}

fn neighbors() -> impl Strategy<Value = Vec<Neighbor>> {
    prop::collection::vec((0u32..6, 0.0f64..4.0), 1..40).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (t, d))| neighbor(i as u64, t, d))
            .collect()
    })
}

fn distribution(tokens: u32) -> impl Strategy<Value = TokenDistribution> {
    prop::collection::vec((0..tokens, 0.0f64..1.0), 1..20).prop_filter_map("zero mass", |w| {
        let d = TokenDistribution::from_weights(w).unwrap();
        (!d.is_empty()).then_some(d)
    })
}

/// Error location predicate shared by every sealed or manifest-checked artifact.
fn locates(err: &Error, offset: u64) -> bool {
    match err {
        Error::Checksum { start, end, .. } => *start <= offset && offset < *end,
        Error::Format { offset: at, .. } => *at <= offset && offset < *at + 8,
        _ => false,
    }
}

proptest! {
    #[test]
    fn knn_distribution_sums_to_one(ns in neighbors(), l in 0.01f64..20.0) {
        let d = neighbors_to_distribution(&ns, l);
        prop_assert!((d.total() - 1.0).abs() < 1e-12);
        prop_assert!(d.iter().all(|(_, p)| p > 0.0 && p <= 1.0));
    }

    #[test]
    fn knn_distribution_is_shift_invariant(ns in neighbors(), l in 0.1f64..20.0, c in 0.0f64..100.0) {
        let shifted: Vec<Neighbor> = ns.iter().map(|n| neighbor(n.record, n.meta.token_id, n.distance + c)).collect();
        let a = neighbors_to_distribution(&ns, l);
        let b = neighbors_to_distribution(&shifted, l);
        prop_assert_eq!(a.len(), b.len());
        for (t, p) in a.iter() {
            prop_assert!((p - b.get(t)).abs() < 1e-9);
        }
    }

    #[test]
    fn large_scale_tends_to_occurrence_frequency(ns in neighbors()) {
        let d = neighbors_to_distribution(&ns, 1e6);
        let mut counts: HashMap<u32, usize> = HashMap::new();
        for n in &ns {
            *counts.entry(n.meta.token_id).or_default() += 1;
        }
        for (t, c) in counts {
            prop_assert!((d.get(t) - c as f64 / ns.len() as f64).abs() < 1e-5);
        }
    }

    #[test]
    fn small_scale_tends_to_nearest(ns in neighbors()) {
        let mut sorted: Vec<f64> = ns.iter().map(|n| n.distance).collect();
        sorted.sort_by(f64::total_cmp);
        let min = sorted[0];
        let gap = sorted.iter().find(|d| **d > min).map(|d| d - min);
        prop_assume!(gap.is_none_or(|g| g > 1e-3));
        let d = neighbors_to_distribution(&ns, 1e-6);
        let mut nearest: HashMap<u32, usize> = HashMap::new();
        let ties = ns.iter().filter(|n| n.distance == min).count();
        for n in ns.iter().filter(|n| n.distance == min) {
            *nearest.entry(n.meta.token_id).or_default() += 1;
        }
        for (t, p) in d.iter() {
            let want = nearest.get(&t).map_or(0.0, |c| *c as f64 / ties as f64);
            prop_assert!((p - want).abs() < 1e-9);
        }
    }

    #[test]
    fn repeated_tokens_add_their_weights(ns in neighbors(), l in 0.1f64..10.0) {
        // Relabel token 0 occurrences to fresh ids; their probabilities must sum back.
        let split: Vec<Neighbor> = ns
            .iter()
            .map(|n| match n.meta.token_id {
                0 => neighbor(n.record, 100 + n.record as u32, n.distance),
                t => neighbor(n.record, t, n.distance),
            })
            .collect();
        let merged = neighbors_to_distribution(&ns, l);
        let parts = neighbors_to_distribution(&split, l);
        let sum: f64 = parts.iter().filter(|(t, _)| *t >= 100).map(|(_, p)| p).sum();
        prop_assert!((merged.get(0) - sum).abs() < 1e-12);
    }

    #[test]
    fn interpolation_is_linear(p in distribution(8), q in distribution(8), lambda in 0.0f64..=1.0) {
        let mixed = interpolate(&p, &q, lambda).unwrap();
        for t in 0..8 {
            let want = lambda * p.get(t) + (1.0 - lambda) * q.get(t);
            prop_assert!((mixed.get(t) - want).abs() < 1e-12);
        }
        prop_assert!((mixed.total() - 1.0).abs() < 1e-12);
        prop_assert_eq!(interpolate(&p, &q, 0.0).unwrap(), q.clone());
        prop_assert_eq!(interpolate(&p, &q, 1.0).unwrap(), p);
    }

    #[test]
    fn precision_is_monotone_in_cutoff(ranking in Just((0u32..30).collect::<Vec<_>>()).prop_shuffle(), gold in 0u32..30) {
        let mut last = 0;
        for r in 0..=30 {
            let hit = precision_at(&ranking, gold, r);
            prop_assert!(hit >= last);
            last = hit;
        }
        prop_assert_eq!(last, 1);
    }

    #[test]
    fn mean_precision_ignores_order(hits in prop::collection::vec((0usize..4, any::<bool>()), 1..60), seed in any::<u64>()) {
        let relations = ["a", "b", "c", "d"];
        let rows: Vec<(&str, bool)> = hits.iter().map(|(r, h)| (relations[*r], *h)).collect();
        let mut shuffled = rows.clone();
        let n = shuffled.len();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        prop_assert_eq!(mean_precision(rows).unwrap(), mean_precision(shuffled).unwrap());
    }

    #[test]
    fn precision_at_one_five_ten_are_ordered(queries in prop::collection::vec((0usize..3, Just((0u32..20).collect::<Vec<_>>()).prop_shuffle(), 0u32..20), 1..40)) {
        let relations = ["a", "b", "c"];
        let at = |r: usize| {
            mean_precision(queries.iter().map(|(rel, ranking, gold)| {
                (relations[*rel], precision_at(ranking, *gold, r) == 1)
            }))
            .unwrap()
        };
        prop_assert!(at(1) <= at(5));
        prop_assert!(at(5) <= at(10));
    }

    #[test]
    fn gold_rank_is_the_ranking_position(d in distribution(12), gold in 0u32..12, extra in prop::collection::btree_set(0u32..12, 0..12)) {
        let surfaces: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
        let corpus = Corpus::ingest([RawDocument::new("t", surfaces.join(" "))]).unwrap();
        let vocab = corpus.vocab();
        let ids: BTreeSet<u32> = extra.iter().chain([&gold]).map(|i| vocab.get(&surfaces[*i as usize]).unwrap()).collect();
        let cands = CandidateVocabulary::new(ids, vocab).unwrap();
        let g = vocab.get(&surfaces[gold as usize]).unwrap();
        // Re-key the distribution onto the corpus ids.
        let d = TokenDistribution::from_weights(d.iter().map(|(t, p)| (vocab.get(&surfaces[t as usize]).unwrap(), p))).unwrap();
        let ranking = rank_candidates(&d, &cands);
        let position = ranking.iter().position(|(t, _)| *t == g);
        prop_assert_eq!(gold_rank(&d, &cands, g), position);
    }

    #[test]
    fn sealed_corruption_is_located(body in prop::collection::vec(any::<u8>(), 0..20_000), at in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let mut data = seal(body.clone());
        prop_assert_eq!(unseal("x", &data).unwrap(), body.as_slice());
        let offset = at.index(data.len());
        data[offset] ^= flip;
        let err = unseal("x", &data).unwrap_err();
        prop_assert!(locates(&err, offset as u64), "byte {} -> {}", offset, err);
    }
}
