use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Unit-norm centroids under cosine similarity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    #[serde(default)]
    pub embedding: alloc::string::String,
    pub centroids: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scales `v` to unit length; a zero vector is left unchanged and reported.
pub fn normalize(v: &mut [f64]) -> bool {
    let n = libm::sqrt(dot(v, v));
    if n == 0.0 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

impl ClusterModel {
    /// Nearest centroid by cosine; ties go to the lowest index.
    pub fn assign(&self, v: &[f64]) -> usize {
        let mut best = 0;
        let mut best_s = f64::NEG_INFINITY;
        for (i, c) in self.centroids.iter().enumerate() {
            let s = dot(c, v);
            if s > best_s {
                best = i;
                best_s = s;
            }
        }
        best
    }

    /// Mean cosine distance of each vector to its assigned centroid.
    pub fn objective(&self, vectors: &[Vec<f64>]) -> f64 {
        let total: f64 = vectors.iter().map(|v| 1.0 - dot(v, &self.centroids[self.assign(v)])).sum();
        total / vectors.len().max(1) as f64
    }

    /// Full-batch spherical Lloyd passes. Returns the objective before the
    /// first pass and after each pass.
    pub fn refine(&mut self, vectors: &[Vec<f64>], passes: usize) -> Vec<f64> {
        let mut history = vec![self.objective(vectors)];
        let dim = self.centroids.first().map_or(0, Vec::len);
        for _ in 0..passes {
            let mut sums = vec![vec![0.0; dim]; self.k];
            for v in vectors {
                let c = self.assign(v);
                sums[c].iter_mut().zip(v).for_each(|(s, x)| *s += x);
            }
            for (c, mut s) in self.centroids.iter_mut().zip(sums) {
                if normalize(&mut s) {
                    *c = s;
                }
            }
            history.push(self.objective(vectors));
        }
        history
    }
}

/// Seeded k-means++ start, then mini-batch updates with per-centroid
/// learning rates `1/count`, renormalising after every update. Centroids
/// left without members are reseeded from the points farthest from their
/// own centroid.
pub fn minibatch_kmeans(vectors: &[Vec<f64>], k: usize, batch: usize, iters: usize, seed: u64) -> Result<ClusterModel> {
    let n = vectors.len();
    if k == 0 || k > n {
        return Err(contract!("cannot form {k} clusters from {n} vectors"));
    }
    let data: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| {
            let mut v = v.clone();
            normalize(&mut v);
            v
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = data.iter().map(|v| (1.0 - dot(v, &data[chosen[0]])).max(0.0)).collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            if dist[pick] == 0.0 {
                (0..n).rev().find(|&i| dist[i] > 0.0).unwrap_or(pick)
            } else {
                pick
            }
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (d, v) in dist.iter_mut().zip(&data) {
            *d = d.min((1.0 - dot(v, &data[next])).max(0.0));
        }
    }
    let mut model = ClusterModel {
        k,
        seed,
        embedding: alloc::string::String::new(),
        centroids: chosen.iter().map(|&i| data[i].clone()).collect(),
    };
    let mut counts = vec![0usize; k];
    let b = batch.clamp(1, n);
    for _ in 0..iters {
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
        let assigned: Vec<usize> = idx.iter().map(|&i| model.assign(&data[i])).collect();
        for (&i, &c) in idx.iter().zip(&assigned) {
            counts[c] += 1;
            let eta = 1.0 / counts[c] as f64;
            let cent = &mut model.centroids[c];
            cent.iter_mut().zip(&data[i]).for_each(|(x, y)| *x = (1.0 - eta) * *x + eta * y);
            if !normalize(cent) {
                cent.clone_from(&data[i]);
            }
        }
    }
    reseed_empty(&mut model, &data);
    Ok(model)
}

fn reseed_empty(model: &mut ClusterModel, data: &[Vec<f64>]) {
    let assign: Vec<usize> = data.iter().map(|v| model.assign(v)).collect();
    let mut members = vec![0usize; model.k];
    assign.iter().for_each(|&c| members[c] += 1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let far = |i: usize| 1.0 - dot(&data[i], &model.centroids[assign[i]]);
    let dists: Vec<f64> = order.iter().map(|&i| far(i)).collect();
    order.sort_by(|&a, &b| dists[b].total_cmp(&dists[a]).then(a.cmp(&b)));
    let mut donors = order.into_iter();
    for c in 0..model.k {
        if members[c] == 0 {
            if let Some(i) = donors.next() {
                model.centroids[c] = data[i].clone();
            }
        }
    }
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |x: u64| (x * x.saturating_sub(1)) as f64 / 2.0;
    let sum_ij: f64 = table.iter().flatten().map(|&x| c2(x)).sum();
    let sum_a: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let sum_b: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let total = c2(n as u64);
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return 1.0;
    }
    (sum_ij - expected) / (max - expected)
}
