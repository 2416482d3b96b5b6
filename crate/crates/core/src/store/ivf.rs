use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{check_query, rank_order, EmbeddingMatrix, Hit, TopK};
use crate::numeric::kernels::{dot_lanes, gemm_acc, transpose};
use crate::{rng, Error, Result};

/// Build settings for an [`IvfIndex`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IvfParams {
    pub partitions: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Train centroids on a seeded random subset of this many rows; every row
    /// is still assigned to a posting list afterwards.
    pub training_sample: Option<usize>,
}

impl IvfParams {
    pub fn new(partitions: usize, iterations: usize, seed: u64) -> Self {
        IvfParams {
            partitions,
            iterations,
            seed,
            training_sample: None,
        }
    }
}

/// Inverted-file index: spherical k-means centroids plus one posting list per
/// centroid. The posting lists partition `0..N`.
#[derive(Clone, Debug)]
pub struct IvfIndex {
    matrix: Arc<EmbeddingMatrix>,
    centroids: Vec<f32>,
    lists: Vec<Vec<usize>>,
}

impl IvfIndex {
    pub fn build(matrix: Arc<EmbeddingMatrix>, partitions: usize, iterations: usize, seed: u64) -> Result<Self> {
        Self::build_with(matrix, &IvfParams::new(partitions, iterations, seed))
    }

    pub fn build_with(matrix: Arc<EmbeddingMatrix>, params: &IvfParams) -> Result<Self> {
        let n = matrix.count();
        let p = params.partitions;
        if p == 0 || p > n {
            return Err(Error::Config(format!("{p} partitions requested for {n} rows")));
        }
        if params.iterations == 0 {
            return Err(Error::Config("k-means needs at least one iteration".into()));
        }
        let dim = matrix.dim();
        let mut rng = rng::stream(params.seed, "ivf");
        let train_ids: Vec<usize> = match params.training_sample {
            Some(s) if s < n => {
                let s = s.max(p);
                let mut ids = index::sample(&mut rng, n, s).into_vec();
                ids.sort_unstable();
                ids
            }
            _ => (0..n).collect(),
        };
        let mut train = Vec::with_capacity(train_ids.len() * dim);
        for &id in &train_ids {
            let row = matrix.row(id).expect("sampled id in range");
            let start = train.len();
            train.extend_from_slice(row);
            // Zero rows stay zero; they join whichever partition wins the tie.
            let _ = super::normalize_row(&mut train[start..]);
        }
        let centroids = spherical_kmeans(&train, dim, p, params.iterations, &mut rng);
        let assignment = assign(matrix.values(), dim, &centroids, p);
        let mut lists = vec![Vec::new(); p];
        for (id, &c) in assignment.iter().enumerate() {
            lists[c].push(id);
        }
        Ok(IvfIndex {
            matrix,
            centroids,
            lists,
        })
    }

    /// Reassembles a saved index. The lists must partition the matrix rows.
    pub fn from_parts(matrix: Arc<EmbeddingMatrix>, centroids: Vec<f32>, lists: Vec<Vec<usize>>) -> Result<Self> {
        let p = lists.len();
        if p == 0 || centroids.len() != p * matrix.dim() {
            return Err(Error::Config(format!(
                "{} centroid values for {p} lists of width {}",
                centroids.len(),
                matrix.dim()
            )));
        }
        let mut seen = vec![false; matrix.count()];
        for &id in lists.iter().flatten() {
            match seen.get_mut(id) {
                Some(s) if !*s => *s = true,
                Some(_) => return Err(Error::Config(format!("row {id} appears in two posting lists"))),
                None => return Err(Error::Lookup { what: "posting", id }),
            }
        }
        if let Some(id) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!("row {id} is in no posting list")));
        }
        Ok(IvfIndex {
            matrix,
            centroids,
            lists,
        })
    }

    pub fn matrix(&self) -> &Arc<EmbeddingMatrix> {
        &self.matrix
    }

    pub fn partitions(&self) -> usize {
        self.lists.len()
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn posting_lists(&self) -> &[Vec<usize>] {
        &self.lists
    }

    /// Scans the `nprobe` partitions whose centroids score highest against the
    /// query and returns the top `k` rows found there.
    pub fn search(&self, query: &[f32], k: usize, nprobe: usize) -> Result<Vec<Hit>> {
        check_query(self.matrix.dim(), query)?;
        let p = self.partitions();
        if nprobe == 0 || nprobe > p {
            return Err(Error::Config(format!("nprobe {nprobe} outside 1..={p}")));
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        let dim = self.matrix.dim();
        let mut order: Vec<Hit> = self
            .centroids
            .chunks_exact(dim)
            .enumerate()
            .map(|(id, c)| Hit {
                id,
                score: dot_lanes(c, query) + 0.0,
            })
            .collect();
        order.sort_by(rank_order);
        let mut top = TopK::new(k);
        for probe in &order[..nprobe] {
            for &id in &self.lists[probe.id] {
                let row = self.matrix.row(id).expect("posting ids are valid rows");
                top.push(id, dot_lanes(row, query));
            }
        }
        Ok(top.into_sorted())
    }
}

const ASSIGN_BLOCK: usize = 128;

/// Best centroid per row (ties to the lowest centroid index).
fn assign(rows: &[f32], dim: usize, centroids: &[f32], p: usize) -> Vec<usize> {
    best_scores(rows, dim, centroids, p).into_iter().map(|(c, _)| c).collect()
}

fn best_scores(rows: &[f32], dim: usize, centroids: &[f32], p: usize) -> Vec<(usize, f32)> {
    let ct = transpose(p, dim, centroids);
    let n = rows.len() / dim;
    let mut out = Vec::with_capacity(n);
    let mut scores = vec![0.0f32; ASSIGN_BLOCK * p];
    let mut start = 0;
    while start < n {
        let m = ASSIGN_BLOCK.min(n - start);
        let block = &mut scores[..m * p];
        block.iter_mut().for_each(|x| *x = 0.0);
        gemm_acc(m, dim, p, &rows[start * dim..(start + m) * dim], &ct, block);
        for r in 0..m {
            let s = &block[r * p..(r + 1) * p];
            let mut best = 0;
            for c in 1..p {
                if s[c] > s[best] {
                    best = c;
                }
            }
            out.push((best, s[best]));
        }
        start += m;
    }
    out
}

/// Spherical k-means with k-means++ seeding; returns `p × dim` unit centroids.
fn spherical_kmeans(train: &[f32], dim: usize, p: usize, iterations: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = train.len() / dim;
    let mut centroids = seed_plus_plus(train, dim, p, rng);
    let mut previous: Option<Vec<usize>> = None;
    for _ in 0..iterations {
        let best = best_scores(train, dim, &centroids, p);
        let assignment: Vec<usize> = best.iter().map(|&(c, _)| c).collect();
        if previous.as_ref() == Some(&assignment) {
            break;
        }
        let mut sums = vec![0.0f64; p * dim];
        let mut sizes = vec![0usize; p];
        for (i, &c) in assignment.iter().enumerate() {
            sizes[c] += 1;
            let row = &train[i * dim..(i + 1) * dim];
            for (s, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row) {
                *s += x as f64;
            }
        }
        // Empty partitions restart at the rows that fit their centroid worst.
        let mut worst: Vec<usize> = (0..n).collect();
        worst.sort_by(|&a, &b| best[a].1.total_cmp(&best[b].1).then(a.cmp(&b)));
        let mut next_worst = worst.into_iter();
        for c in 0..p {
            let target = &mut centroids[c * dim..(c + 1) * dim];
            let sum = &sums[c * dim..(c + 1) * dim];
            let norm = num_traits::Float::sqrt(sum.iter().map(|x| x * x).sum::<f64>());
            if sizes[c] > 0 && norm > 0.0 {
                for (t, &s) in target.iter_mut().zip(sum) {
                    *t = (s / norm) as f32;
                }
            } else if let Some(r) = next_worst.next() {
                target.copy_from_slice(&train[r * dim..(r + 1) * dim]);
            }
        }
        previous = Some(assignment);
    }
    centroids
}

/// k-means++ seeding with the squared chord distance `2 − 2·cos`.
fn seed_plus_plus(train: &[f32], dim: usize, p: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = train.len() / dim;
    let mut centroids = Vec::with_capacity(p * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&train[first * dim..(first + 1) * dim]);
    let mut dist: Vec<f64> = (0..n)
        .map(|i| chord2(&train[i * dim..(i + 1) * dim], &centroids[..dim]))
        .collect();
    dist[first] = 0.0;
    for _ in 1..p {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            while dist[chosen] == 0.0 && chosen > 0 {
                chosen -= 1;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(&train[pick * dim..(pick + 1) * dim]);
        let c = centroids[start..].to_vec();
        for (i, d) in dist.iter_mut().enumerate() {
            let nd = chord2(&train[i * dim..(i + 1) * dim], &c);
            if nd < *d {
                *d = nd;
            }
        }
        dist[pick] = 0.0;
    }
    centroids
}

fn chord2(a: &[f32], b: &[f32]) -> f64 {
    (2.0 - 2.0 * dot_lanes(a, b) as f64).max(0.0)
}
