//! Inverted-file index with optional product quantization, for search over the whole
//! datastore without a retrieval step.
//!
//! Persisted layout (sealed with the checksum trailer from [`crate::binio`]):
//!
//! ```text
//! "BKNNIVF\0" | version u16 | dim u32
//! n_clusters u32 | n_probe u32 | training_sample u64 | pq_enabled u8 | pq_m u32 | pq_bits u8 | seed u64
//! centroid_count u64 | centroid_count x dim f32
//! inertia_count u64 | f64*
//! if pq_enabled: m x (codeword_count u64 | codeword_count x dim/m f32 | max_error f64)
//! populated u8 | record_count u64
//! per centroid: entry_count u64 | (record u64, doc u32, sentence u16, token u16, token_id u32, payload)*
//! ```
//!
//! The payload is the full key (dim f32) without PQ, else m code bytes.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{seal, unseal, ByteReader, ByteWriter};
use crate::datastore::{RecordMeta, RecordSource};
use crate::error::{Error, Result};
use crate::kmeans::{kmeans, nearest, KMeansConfig};
use crate::knn::{euclidean, squared_euclidean, Neighbor, TopK};

pub const ANN_MAGIC: &[u8; 8] = b"BKNNIVF\0";
pub const ANN_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IvfConfig {
    pub n_clusters: usize,
    pub n_probe: usize,
    /// Number of keys sampled for training.
    pub training_sample: usize,
    pub pq_enabled: bool,
    pub pq_subquantizers: usize,
    pub pq_bits: u8,
    pub seed: u64,
}

impl Default for IvfConfig {
    fn default() -> Self {
        Self {
            n_clusters: 256,
            n_probe: 8,
            training_sample: 100_000,
            pq_enabled: false,
            pq_subquantizers: 16,
            pq_bits: 8,
            seed: 0,
        }
    }
}

impl IvfConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.n_clusters == 0 || self.n_probe == 0 || self.training_sample == 0 {
            return bad("n_clusters, n_probe and training_sample must be positive".into());
        }
        if self.n_probe > self.n_clusters {
            return bad(format!(
                "n_probe {} exceeds n_clusters {}",
                self.n_probe, self.n_clusters
            ));
        }
        if self.pq_enabled {
            let m = self.pq_subquantizers;
            if m == 0 || !dim.is_multiple_of(m) {
                return bad(format!(
                    "dimension {dim} is not divisible into {m} subspaces"
                ));
            }
            if self.pq_bits != 8 {
                return bad(format!(
                    "only 8-bit codes are supported, got {}",
                    self.pq_bits
                ));
            }
        }
        Ok(())
    }

    /// Bytes per stored PQ code, or 0 without PQ.
    pub fn code_bytes(&self) -> usize {
        if self.pq_enabled {
            self.pq_subquantizers * self.pq_bits as usize / 8
        } else {
            0
        }
    }
}

/// Per-subspace codebooks over residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductQuantizer {
    pub dim: usize,
    pub m: usize,
    /// `codebooks[j]` is row-major with `dim / m` values per codeword.
    pub codebooks: Vec<Vec<f32>>,
    /// Largest subspace reconstruction distance seen on the training residuals.
    pub max_error: Vec<f64>,
}

impl ProductQuantizer {
    pub fn sub_dim(&self) -> usize {
        self.dim / self.m
    }

    pub fn encode(&self, residual: &[f32]) -> Vec<u8> {
        let s = self.sub_dim();
        (0..self.m)
            .map(|j| nearest(&self.codebooks[j], s, &residual[j * s..(j + 1) * s]).0 as u8)
            .collect()
    }

    pub fn decode(&self, code: &[u8]) -> Vec<f32> {
        let s = self.sub_dim();
        code.iter()
            .enumerate()
            .flat_map(|(j, c)| {
                let c = *c as usize;
                self.codebooks[j][c * s..(c + 1) * s].iter().copied()
            })
            .collect()
    }

    /// Squared distances from each residual subvector to every codeword.
    fn distance_tables(&self, residual: &[f32]) -> Vec<Vec<f64>> {
        let s = self.sub_dim();
        (0..self.m)
            .map(|j| {
                let q = &residual[j * s..(j + 1) * s];
                self.codebooks[j]
                    .chunks_exact(s)
                    .map(|c| squared_euclidean(q, c))
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct PostingList {
    records: Vec<u64>,
    metas: Vec<RecordMeta>,
    /// Keys (dim floats per entry) without PQ.
    keys: Vec<f32>,
    /// Codes (m bytes per entry) with PQ.
    codes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    config: IvfConfig,
    dim: usize,
    centroids: Vec<f32>,
    inertia_log: Vec<f64>,
    pq: Option<ProductQuantizer>,
    populated: bool,
    record_count: u64,
    lists: Vec<PostingList>,
}

fn residual(key: &[f32], centroid: &[f32]) -> Vec<f32> {
    key.iter().zip(centroid).map(|(k, c)| k - c).collect()
}

impl IvfIndex {
    /// Cluster a uniform sample of the keys; postings start empty.
    pub fn train(source: &dyn RecordSource, config: &IvfConfig) -> Result<Self> {
        let dim = source.dim();
        config.validate(dim)?;
        let n = source.record_count();
        if n == 0 {
            return Err(Error::InvalidArgument(
                "cannot train on an empty datastore".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let wanted: BTreeSet<u64> = if (config.training_sample as u64) < n {
            sample(&mut rng, n as usize, config.training_sample)
                .into_iter()
                .map(|i| i as u64)
                .collect()
        } else {
            (0..n).collect()
        };
        let mut points = Vec::with_capacity(wanted.len() * dim);
        source.for_each_record(&source.full_range(), &mut |id, _, key| {
            if wanted.contains(&id) {
                points.extend_from_slice(key);
            }
        })?;

        let coarse = kmeans(
            &points,
            dim,
            &KMeansConfig::new(config.n_clusters, rng.random()),
        )?;
        let pq = if config.pq_enabled {
            let seeds: Vec<u64> = (0..config.pq_subquantizers).map(|_| rng.random()).collect();
            Some(train_pq(&points, &coarse.centroids, dim, config, &seeds)?)
        } else {
            None
        };
        let lists = vec![PostingList::default(); coarse.len()];
        Ok(Self {
            config: *config,
            dim,
            centroids: coarse.centroids,
            inertia_log: coarse.inertia_log,
            pq,
            populated: false,
            record_count: 0,
            lists,
        })
    }

    /// Insert every record into the list of its nearest centroid.
    pub fn populate(&mut self, source: &dyn RecordSource) -> Result<()> {
        if self.populated {
            return Err(Error::InvalidArgument("index is already populated".into()));
        }
        if source.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: source.dim(),
                context: "ann populate".into(),
            });
        }
        let mut batch: Vec<(u64, RecordMeta, Vec<f32>)> = Vec::new();
        source.for_each_record(&source.full_range(), &mut |id, meta, key| {
            batch.push((id, meta, key.to_vec()));
            if batch.len() == 4096 {
                self.insert_batch(std::mem::take(&mut batch));
            }
        })?;
        self.insert_batch(batch);
        self.populated = true;
        Ok(())
    }

    fn insert_batch(&mut self, batch: Vec<(u64, RecordMeta, Vec<f32>)>) {
        let dim = self.dim;
        let centroids = &self.centroids;
        let pq = self.pq.as_ref();
        let placed: Vec<(usize, Option<Vec<u8>>)> = batch
            .par_iter()
            .map(|(_, _, key)| {
                let (c, _) = nearest(centroids, dim, key);
                let code =
                    pq.map(|pq| pq.encode(&residual(key, &centroids[c * dim..(c + 1) * dim])));
                (c, code)
            })
            .collect();
        for ((id, meta, key), (c, code)) in batch.into_iter().zip(placed) {
            let list = &mut self.lists[c];
            list.records.push(id);
            list.metas.push(meta);
            match code {
                Some(code) => list.codes.extend(code),
                None => list.keys.extend(key),
            }
            self.record_count += 1;
        }
    }

    pub fn config(&self) -> &IvfConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_clusters(&self) -> usize {
        self.lists.len()
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn inertia_log(&self) -> &[f64] {
        &self.inertia_log
    }

    pub fn pq(&self) -> Option<&ProductQuantizer> {
        self.pq.as_ref()
    }

    pub fn is_populated(&self) -> bool {
        self.populated
    }

    pub fn record_count(&self) -> u64 {
        self.record_count
    }

    /// Record ids in each posting list.
    pub fn list_records(&self, c: usize) -> &[u64] {
        &self.lists[c].records
    }

    /// The stored PQ code of the entry at `position` in list `c`.
    pub fn code(&self, c: usize, position: usize) -> Option<&[u8]> {
        let m = self.pq.as_ref()?.m;
        self.lists[c].codes.get(position * m..(position + 1) * m)
    }

    /// Centroid indices sorted by distance to `query`, ties by index.
    pub fn probe_order(&self, query: &[f32]) -> Vec<usize> {
        let mut d: Vec<(f64, usize)> = self
            .centroids
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(i, c)| (squared_euclidean(query, c), i))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.into_iter().map(|(_, i)| i).collect()
    }

    /// The `k` best entries of the `n_probe` lists nearest to `query`, nearest first.
    ///
    /// Distances are exact without PQ and asymmetric (exact query, decoded database
    /// residual) with PQ.
    pub fn search(&self, query: &[f32], k: usize, n_probe: usize) -> Result<Vec<Neighbor>> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: query.len(),
                context: "ann query".into(),
            });
        }
        if !self.populated {
            return Err(Error::InvalidArgument(
                "index has not been populated".into(),
            ));
        }
        if n_probe == 0 || n_probe > self.config.n_clusters {
            return Err(Error::InvalidArgument(format!(
                "n_probe must be in 1..={}, got {n_probe}",
                self.config.n_clusters
            )));
        }
        let dim = self.dim;
        let mut top = TopK::new(k);
        for c in self.probe_order(query).into_iter().take(n_probe) {
            let list = &self.lists[c];
            match &self.pq {
                None => {
                    for (i, key) in list.keys.chunks_exact(dim).enumerate() {
                        let distance = euclidean(query, key);
                        if !top.rejects(distance) {
                            top.push(Neighbor {
                                record: list.records[i],
                                meta: list.metas[i],
                                distance,
                            });
                        }
                    }
                }
                Some(pq) => {
                    let tables = pq.distance_tables(&residual(query, self.centroid(c)));
                    for (i, code) in list.codes.chunks_exact(pq.m).enumerate() {
                        let sq: f64 = code.iter().zip(&tables).map(|(b, t)| t[*b as usize]).sum();
                        let distance = sq.sqrt();
                        if !top.rejects(distance) {
                            top.push(Neighbor {
                                record: list.records[i],
                                meta: list.metas[i],
                                distance,
                            });
                        }
                    }
                }
            }
        }
        Ok(top.into_sorted())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = ByteWriter::new();
        w.bytes(ANN_MAGIC);
        w.u16(ANN_VERSION);
        w.u32(self.dim as u32);
        w.u32(c.n_clusters as u32);
        w.u32(c.n_probe as u32);
        w.u64(c.training_sample as u64);
        w.u8(c.pq_enabled as u8);
        w.u32(c.pq_subquantizers as u32);
        w.u8(c.pq_bits);
        w.u64(c.seed);
        w.u64(self.lists.len() as u64);
        w.f32s(&self.centroids);
        w.u64(self.inertia_log.len() as u64);
        for v in &self.inertia_log {
            w.f64(*v);
        }
        if let Some(pq) = &self.pq {
            for (book, err) in pq.codebooks.iter().zip(&pq.max_error) {
                w.u64((book.len() / pq.sub_dim()) as u64);
                w.f32s(book);
                w.f64(*err);
            }
        }
        w.u8(self.populated as u8);
        w.u64(self.record_count);
        for list in &self.lists {
            w.u64(list.records.len() as u64);
            for (i, (id, meta)) in list.records.iter().zip(&list.metas).enumerate() {
                w.u64(*id);
                w.u32(meta.doc_id);
                w.u16(meta.sentence_index);
                w.u16(meta.token_index);
                w.u32(meta.token_id);
                match &self.pq {
                    Some(pq) => w.bytes(&list.codes[i * pq.m..(i + 1) * pq.m]),
                    None => w.f32s(&list.keys[i * self.dim..(i + 1) * self.dim]),
                }
            }
        }
        seal(w.into_inner())
    }

    pub fn from_bytes(what: &str, data: &[u8]) -> Result<Self> {
        let body = unseal(what, data)?;
        let mut r = ByteReader::new(what, body);
        r.expect(ANN_MAGIC)?;
        let version = r.u16()?;
        if version != ANN_VERSION {
            return Err(Error::format(
                what,
                8,
                format!("unsupported version {version}"),
            ));
        }
        let dim = r.u32()? as usize;
        let config_at = r.pos();
        let config = IvfConfig {
            n_clusters: r.u32()? as usize,
            n_probe: r.u32()? as usize,
            training_sample: r.u64()? as usize,
            pq_enabled: r.u8()? != 0,
            pq_subquantizers: r.u32()? as usize,
            pq_bits: r.u8()?,
            seed: r.u64()?,
        };
        if dim == 0 {
            return Err(Error::format(what, 10, "dimension is zero"));
        }
        config
            .validate(dim)
            .map_err(|e| Error::format(what, config_at, e.to_string()))?;
        let at = r.pos();
        let n_centroids = r.count(dim * 4)?;
        if n_centroids == 0 || n_centroids > config.n_clusters {
            return Err(Error::format(
                what,
                at,
                format!("bad centroid count {n_centroids}"),
            ));
        }
        let centroids = r.f32s(n_centroids * dim)?;
        let n_inertia = r.count(8)?;
        let inertia_log = (0..n_inertia).map(|_| r.f64()).collect::<Result<_>>()?;
        let pq = if config.pq_enabled {
            let m = config.pq_subquantizers;
            let sub = dim / m;
            let mut codebooks = Vec::with_capacity(m);
            let mut max_error = Vec::with_capacity(m);
            for _ in 0..m {
                let at = r.pos();
                let words = r.count(sub * 4)?;
                if words == 0 || words > 256 {
                    return Err(Error::format(
                        what,
                        at,
                        format!("bad codeword count {words}"),
                    ));
                }
                codebooks.push(r.f32s(words * sub)?);
                max_error.push(r.f64()?);
            }
            Some(ProductQuantizer {
                dim,
                m,
                codebooks,
                max_error,
            })
        } else {
            None
        };
        let populated = r.u8()? != 0;
        let record_count = r.u64()?;
        let payload = match &pq {
            Some(pq) => pq.m,
            None => dim * 4,
        };
        let mut lists = Vec::with_capacity(n_centroids);
        let mut seen = 0u64;
        for _ in 0..n_centroids {
            let n = r.count(20 + payload)?;
            let mut list = PostingList::default();
            for _ in 0..n {
                list.records.push(r.u64()?);
                list.metas.push(RecordMeta {
                    doc_id: r.u32()?,
                    sentence_index: r.u16()?,
                    token_index: r.u16()?,
                    token_id: r.u32()?,
                });
                match &pq {
                    Some(pq) => {
                        let at = r.pos();
                        let code = r.take(pq.m)?;
                        for (j, b) in code.iter().enumerate() {
                            if *b as usize >= pq.codebooks[j].len() / pq.sub_dim() {
                                return Err(Error::format(
                                    what,
                                    at + j as u64,
                                    "code out of range",
                                ));
                            }
                        }
                        list.codes.extend_from_slice(code);
                    }
                    None => list.keys.extend(r.f32s(dim)?),
                }
            }
            seen += n as u64;
            lists.push(list);
        }
        if seen != record_count {
            return Err(Error::format(
                what,
                r.pos(),
                format!("posting lists hold {seen} records, header says {record_count}"),
            ));
        }
        r.finish()?;
        Ok(Self {
            config,
            dim,
            centroids,
            inertia_log,
            pq,
            populated,
            record_count,
            lists,
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

fn train_pq(
    points: &[f32],
    centroids: &[f32],
    dim: usize,
    config: &IvfConfig,
    seeds: &[u64],
) -> Result<ProductQuantizer> {
    let m = config.pq_subquantizers;
    let sub = dim / m;
    let residuals: Vec<f32> = points
        .par_chunks_exact(dim)
        .flat_map_iter(|x| {
            let (c, _) = nearest(centroids, dim, x);
            residual(x, &centroids[c * dim..(c + 1) * dim])
        })
        .collect();
    let words = 1usize << config.pq_bits;
    let trained: Vec<Result<(Vec<f32>, f64)>> = (0..m)
        .into_par_iter()
        .map(|j| {
            let subpoints: Vec<f32> = residuals
                .chunks_exact(dim)
                .flat_map(|r| r[j * sub..(j + 1) * sub].iter().copied())
                .collect();
            let book = kmeans(&subpoints, sub, &KMeansConfig::new(words, seeds[j]))?;
            let max_error = subpoints
                .chunks_exact(sub)
                .map(|x| nearest(&book.centroids, sub, x).1.sqrt())
                .fold(0.0, f64::max);
            Ok((book.centroids, max_error))
        })
        .collect();
    let mut codebooks = Vec::with_capacity(m);
    let mut max_error = Vec::with_capacity(m);
    for t in trained {
        let (book, err) = t?;
        codebooks.push(book);
        max_error.push(err);
    }
    Ok(ProductQuantizer {
        dim,
        m,
        codebooks,
        max_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::MemoryStore;

    fn store(points: &[[f32; 2]]) -> MemoryStore {
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
                    p.to_vec(),
                )
            })
            .collect();
        MemoryStore::from_records(2, records).unwrap()
    }

    fn small_config(n_clusters: usize) -> IvfConfig {
        IvfConfig {
            n_clusters,
            n_probe: 1,
            ..IvfConfig::default()
        }
    }

    #[test]
    fn centroids_are_the_keys_when_counts_match() {
        let s = store(&[[0.0, 0.0], [5.0, 5.0], [9.0, 1.0]]);
        let mut idx = IvfIndex::train(&s, &small_config(3)).unwrap();
        assert_eq!(idx.inertia_log().last(), Some(&0.0));
        idx.populate(&s).unwrap();
        for c in 0..3 {
            assert_eq!(idx.list_records(c).len(), 1);
            let id = idx.list_records(c)[0];
            assert_eq!(idx.centroid(c), s.key(id).unwrap());
        }
        assert!(idx.populate(&s).is_err());
    }

    #[test]
    fn single_probe_stays_in_one_list() {
        let pts: Vec<[f32; 2]> = (0..40)
            .map(|i| [(i % 4) as f32 * 10.0 + (i / 4) as f32 * 0.01, 0.0])
            .collect();
        let s = store(&pts);
        let mut idx = IvfIndex::train(&s, &small_config(4)).unwrap();
        idx.populate(&s).unwrap();
        let found = idx.search(&[10.0, 0.0], 40, 1).unwrap();
        let list = idx.probe_order(&[10.0, 0.0])[0];
        let members: BTreeSet<u64> = idx.list_records(list).iter().copied().collect();
        assert_eq!(found.len(), members.len());
        assert!(found.iter().all(|n| members.contains(&n.record)));
        assert!(idx.search(&[1.0], 1, 1).is_err());
        assert!(idx.search(&[1.0, 0.0], 1, 5).is_err());
    }

    #[test]
    fn unpopulated_index_refuses_search() {
        let s = store(&[[0.0, 0.0], [1.0, 1.0]]);
        let idx = IvfIndex::train(&s, &small_config(2)).unwrap();
        assert!(idx.search(&[0.0, 0.0], 1, 1).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(IvfConfig::default().validate(128).is_ok());
        let c = IvfConfig {
            n_probe: 300,
            ..IvfConfig::default()
        };
        assert!(c.validate(128).is_err());
        let c = IvfConfig {
            pq_enabled: true,
            pq_subquantizers: 10,
            ..IvfConfig::default()
        };
        assert!(c.validate(128).is_err());
        let c = IvfConfig {
            pq_enabled: true,
            ..IvfConfig::default()
        };
        assert_eq!(c.code_bytes(), 16);
    }

    #[test]
    fn byte_round_trip_with_and_without_pq() {
        let pts: Vec<[f32; 2]> = (0..60)
            .map(|i| [(i * 7 % 13) as f32, (i * 3 % 11) as f32])
            .collect();
        let s = store(&pts);
        for pq_enabled in [false, true] {
            let config = IvfConfig {
                n_clusters: 4,
                n_probe: 2,
                pq_enabled,
                pq_subquantizers: 2,
                ..IvfConfig::default()
            };
            let mut idx = IvfIndex::train(&s, &config).unwrap();
            idx.populate(&s).unwrap();
            let bytes = idx.to_bytes();
            let back = IvfIndex::from_bytes("ann", &bytes).unwrap();
            assert_eq!(back, idx);
            assert_eq!(back.to_bytes(), bytes);
        }
    }
}
