//! Lloyd's k-means with k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iterations: usize,
    /// Stop once the relative inertia decrease falls below this.
    pub tolerance: f64,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iterations: 25,
            tolerance: 1e-4,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub dim: usize,
    /// Row-major, `len() / dim` centroids. Fewer than `k` when there are fewer distinct points.
    pub centroids: Vec<f32>,
    /// Inertia after each assignment step, first entry for the seeding.
    pub inertia_log: Vec<f64>,
}

impl KMeans {
    pub fn len(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    pub fn final_inertia(&self) -> f64 {
        self.inertia_log.last().copied().unwrap_or(0.0)
    }
}

fn sq_dist64(x: &[f32], c: &[f64]) -> f64 {
    x.iter()
        .zip(c)
        .map(|(a, b)| {
            let d = *a as f64 - b;
            d * d
        })
        .sum()
}

/// Index and squared distance of the nearest row of `centroids`; ties go to the lower index.
pub fn nearest(centroids: &[f32], dim: usize, x: &[f32]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let d = crate::knn::squared_euclidean(x, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn nearest64(centroids: &[f64], dim: usize, x: &[f32]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist64(x, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn seed_plus_plus(points: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let first = rng.random_range(0..n);
    let mut centroids: Vec<f64> = row(first).iter().map(|v| *v as f64).collect();
    let mut d2: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| sq_dist64(row(i), &centroids))
        .collect();
    while centroids.len() / dim < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, w) in d2.iter().enumerate() {
            if *w > 0.0 {
                acc += w;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
        }
        let Some(pick) = pick else { break };
        let c: Vec<f64> = row(pick).iter().map(|v| *v as f64).collect();
        d2.par_iter_mut().enumerate().for_each(|(i, w)| {
            let d = sq_dist64(row(i), &c);
            if d < *w {
                *w = d;
            }
        });
        centroids.extend(c);
    }
    centroids
}

/// Cluster the row-major `points` into at most `config.k` groups.
pub fn kmeans(points: &[f32], dim: usize, config: &KMeansConfig) -> Result<KMeans> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(Error::InvalidArgument(format!(
            "{} values do not form rows of dimension {dim}",
            points.len()
        )));
    }
    if points.is_empty() {
        return Err(Error::InvalidArgument("k-means over no points".into()));
    }
    if config.k == 0 {
        return Err(Error::InvalidArgument("k-means needs k >= 1".into()));
    }
    let n = points.len() / dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut centroids = seed_plus_plus(points, dim, config.k, &mut rng);
    let k = centroids.len() / dim;
    let mut assignment = vec![usize::MAX; n];
    let mut inertia_log = Vec::new();
    for iteration in 0..=config.max_iterations {
        let fresh: Vec<(usize, f64)> = points
            .par_chunks_exact(dim)
            .map(|x| nearest64(&centroids, dim, x))
            .collect();
        let inertia: f64 = fresh.iter().map(|(_, d)| d).sum();
        let changed = fresh.iter().zip(&assignment).any(|((c, _), old)| c != old);
        for (slot, (c, _)) in assignment.iter_mut().zip(&fresh) {
            *slot = *c;
        }
        let converged = match inertia_log.last() {
            Some(prev) => *prev <= 0.0 || (prev - inertia) / prev < config.tolerance,
            None => false,
        };
        inertia_log.push(inertia);
        if !changed || converged || inertia == 0.0 || iteration == config.max_iterations {
            break;
        }
        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (x, c) in points.chunks_exact(dim).zip(&assignment) {
            counts[*c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                *s += *v as f64;
            }
        }
        for c in 0..k {
            // Empty clusters keep their previous centroid.
            if counts[c] > 0 {
                for (dst, s) in centroids[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                {
                    *dst = s / counts[c] as f64;
                }
            }
        }
    }
    Ok(KMeans {
        dim,
        centroids: centroids.iter().map(|v| *v as f32).collect(),
        inertia_log,
    })
}
