//! Exact k-nearest-neighbor search over datastore ranges and the conversion of
//! neighbor distances into a token distribution.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::datastore::{RecordMeta, RecordRange, RecordSource};
use crate::distribution::TokenDistribution;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnConfig {
    /// Number of neighbors retrieved.
    pub k: usize,
    /// Temperature `l` dividing distances in the softmax.
    pub distance_scale: f64,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self {
            k: 128,
            distance_scale: 6.0,
        }
    }
}

impl KnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if !(self.distance_scale > 0.0 && self.distance_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "distance scale must be positive, got {}",
                self.distance_scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub record: u64,
    pub meta: RecordMeta,
    /// Euclidean distance to the query.
    pub distance: f64,
}

impl Neighbor {
    pub fn token_id(&self) -> TokenId {
        self.meta.token_id
    }

    /// Total order: distance, then record id.
    pub fn rank_cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.record.cmp(&other.record))
    }
}

/// Euclidean distance with the sum accumulated in `f64`.
pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    squared_euclidean(a, b).sqrt()
}

pub fn squared_euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum()
}

struct HeapEntry(Neighbor);

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for HeapEntry {}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.rank_cmp(&other.0)
    }
}

/// Bounded collector keeping the `k` best neighbors under [`Neighbor::rank_cmp`].
pub struct TopK {
    k: usize,
    heap: BinaryHeap<HeapEntry>,
}

impl TopK {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    pub fn push(&mut self, candidate: Neighbor) {
        if self.k == 0 {
            return;
        }
        if self.heap.len() < self.k {
            self.heap.push(HeapEntry(candidate));
        } else if let Some(worst) = self.heap.peek() {
            if candidate.rank_cmp(&worst.0) == Ordering::Less {
                self.heap.pop();
                self.heap.push(HeapEntry(candidate));
            }
        }
    }

    /// Would a candidate at `distance` (and any record id) be rejected?
    pub fn rejects(&self, distance: f64) -> bool {
        self.heap.len() == self.k
            && self
                .heap
                .peek()
                .is_some_and(|w| distance.total_cmp(&w.0.distance) == Ordering::Greater)
    }

    pub fn into_sorted(self) -> Vec<Neighbor> {
        let mut out: Vec<Neighbor> = self.heap.into_iter().map(|e| e.0).collect();
        out.sort_by(Neighbor::rank_cmp);
        out
    }
}

/// The `k` records of `ranges` closest to `query`, nearest first.
///
/// Exact: every record in the ranges is compared. Equal distances keep record order.
pub fn knn(
    query: &[f32],
    source: &dyn RecordSource,
    ranges: &[RecordRange],
    k: usize,
) -> Result<Vec<Neighbor>> {
    if query.len() != source.dim() {
        return Err(Error::DimensionMismatch {
            expected: source.dim(),
            found: query.len(),
            context: "knn query".into(),
        });
    }
    let mut top = TopK::new(k);
    source.for_each_record(ranges, &mut |record, meta, key| {
        let distance = euclidean(query, key);
        if !top.rejects(distance) {
            top.push(Neighbor {
                record,
                meta,
                distance,
            });
        }
    })?;
    Ok(top.into_sorted())
}

/// Softmax over `-d / l`, summed per token.
///
/// The minimum distance is subtracted before exponentiation; normalization cancels the
/// shift exactly. No neighbors gives the empty distribution.
pub fn neighbors_to_distribution(neighbors: &[Neighbor], distance_scale: f64) -> TokenDistribution {
    let Some(min) = neighbors.iter().map(|n| n.distance).min_by(f64::total_cmp) else {
        return TokenDistribution::empty();
    };
    let mut weights: BTreeMap<TokenId, f64> = BTreeMap::new();
    for n in neighbors {
        *weights.entry(n.token_id()).or_default() += (-(n.distance - min) / distance_scale).exp();
    }
    let total: f64 = weights.values().sum();
    weights.values_mut().for_each(|w| *w /= total);
    weights.retain(|_, w| *w > 0.0);
    TokenDistribution::from_raw(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::MemoryStore;

    fn neighbor(token_id: TokenId, distance: f64, record: u64) -> Neighbor {
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

    fn line_store(points: &[f32]) -> MemoryStore {
        let records = points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                (
                    RecordMeta {
                        doc_id: 0,
                        sentence_index: 0,
                        token_index: i as u16,
                        token_id: i as u32,
                    },
                    vec![*p],
                )
            })
            .collect();
        MemoryStore::from_records(1, records).unwrap()
    }

    #[test]
    fn single_neighbor_gets_all_mass() {
        let d = neighbors_to_distribution(&[neighbor(4, 3.2, 0)], 6.0);
        assert_eq!(d.get(4), 1.0);
        assert!(neighbors_to_distribution(&[], 6.0).is_empty());
    }

    #[test]
    fn equal_distances_count_occurrences() {
        let d = neighbors_to_distribution(
            &[
                neighbor(1, 2.0, 0),
                neighbor(1, 2.0, 1),
                neighbor(2, 2.0, 2),
            ],
            6.0,
        );
        assert!((d.get(1) - 2.0 / 3.0).abs() < 1e-15);
        assert!((d.get(2) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn self_match_comes_first() {
        let store = line_store(&[5.0, 1.0, 3.0, 1.0]);
        let found = knn(&[1.0], &store, &store.full_range(), 3).unwrap();
        let ids: Vec<u64> = found.iter().map(|n| n.record).collect();
        // Two records at distance 0; record order breaks the tie.
        assert_eq!(ids, vec![1, 3, 2]);
        assert_eq!(found[0].distance, 0.0);
    }

    #[test]
    fn small_slice_returns_fewer_than_k() {
        let store = line_store(&[5.0, 1.0]);
        let range = [RecordRange { start: 1, end: 2 }];
        let found = knn(&[0.0], &store, &range, 8).unwrap();
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].record, 1);
        assert!(knn(&[0.0, 1.0], &store, &range, 8).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(KnnConfig::default().validate().is_ok());
        assert!(KnnConfig {
            k: 0,
            distance_scale: 6.0
        }
        .validate()
        .is_err());
        assert!(KnnConfig {
            k: 1,
            distance_scale: 0.0
        }
        .validate()
        .is_err());
    }
}
