//! Cosine clustering: spherical k-means and average-linkage agglomerative
//! clustering on `1 - cos`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingTable;
use crate::error::{invalid, Error, Result};
use crate::rng::{stream, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Kmeans,
    Hierarchical,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Kmeans => "kmeans",
            Algorithm::Hierarchical => "hierarchical",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub k: usize,
    /// Cluster id of each table row.
    pub labels: Vec<usize>,
    /// Unit-norm centroids.
    pub centroids: Vec<Vec<f64>>,
    /// Sum over points of the cosine to their centroid, after each
    /// iteration (one entry for hierarchical clustering).
    pub objective: Vec<f64>,
}

impl ClusterAssignment {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }

    /// CSV with header `index,cluster`; `indices` are the image indices of
    /// the clustered table rows.
    pub fn write_csv(&self, indices: &[usize], path: impl AsRef<Path>) -> Result<()> {
        if indices.len() != self.labels.len() {
            return Err(invalid("index count differs from assignment length"));
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["index", "cluster"])?;
        for (i, l) in indices.iter().zip(&self.labels) {
            w.write_record([i.to_string(), l.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read `index,cluster` rows back as `(image index, cluster)` pairs.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<(usize, usize)>> {
        let mut r = csv::Reader::from_path(path)?;
        let mut out = Vec::new();
        for rec in r.deserialize() {
            let (i, c): (usize, usize) = rec?;
            out.push((i, c));
        }
        Ok(out)
    }
}

fn unit_rows(emb: &EmbeddingTable) -> Result<Vec<Vec<f64>>> {
    (0..emb.len())
        .map(|i| {
            let r = emb.row(i);
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::ZeroNorm {
                    index: emb.indices()[i],
                });
            }
            Ok(r.iter().map(|v| v / norm).collect())
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Normalized mean of the member rows; falls back to the first member when
/// the mean vanishes.
fn centroid(x: &[Vec<f64>], members: impl Iterator<Item = usize>) -> Vec<f64> {
    let d = x[0].len();
    let mut c = vec![0.0; d];
    let mut first = None;
    for i in members {
        first.get_or_insert(i);
        for (cv, xv) in c.iter_mut().zip(&x[i]) {
            *cv += xv;
        }
    }
    let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 1e-12 {
        c.iter_mut().for_each(|v| *v /= norm);
        c
    } else {
        first.map_or(c, |i| x[i].clone())
    }
}

fn centroids(x: &[Vec<f64>], labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|c| centroid(x, (0..x.len()).filter(|&i| labels[i] == c)))
        .collect()
}

fn objective(x: &[Vec<f64>], labels: &[usize], cents: &[Vec<f64>]) -> f64 {
    x.iter().zip(labels).map(|(r, &l)| dot(r, &cents[l])).sum()
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(invalid(format!("need 1 <= k <= n, got k = {k}, n = {n}")));
    }
    Ok(())
}

/// Spherical k-means with k-means++ seeding on cosine distance.
pub fn kmeans_cosine(emb: &EmbeddingTable, k: usize, seed: u64, max_iters: usize) -> Result<ClusterAssignment> {
    let x = unit_rows(emb)?;
    let n = x.len();
    check_k(n, k)?;
    let mut rng = stream(seed, Stream::Cluster);

    let mut cents = vec![x[rng.random_range(0..n)].clone()];
    while cents.len() < k {
        let dist: Vec<f64> = x
            .iter()
            .map(|r| {
                cents
                    .iter()
                    .map(|c| (1.0 - dot(r, c)).max(0.0))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, d) in dist.iter().enumerate() {
                if u < *d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        cents.push(x[pick].clone());
    }

    let mut labels = vec![usize::MAX; n];
    let mut trace = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        for (i, r) in x.iter().enumerate() {
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for (c, cent) in cents.iter().enumerate() {
                let s = dot(r, cent);
                if s > best_sim {
                    best_sim = s;
                    best = c;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        // reseed empty clusters from the point farthest from its centroid
        let mut sizes = vec![0; k];
        labels.iter().for_each(|&l| sizes[l] += 1);
        for c in 0..k {
            if sizes[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| sizes[labels[i]] > 1)
                .min_by(|&a, &b| dot(&x[a], &cents[labels[a]]).total_cmp(&dot(&x[b], &cents[labels[b]])))
                .expect("k <= n leaves a donor");
            sizes[labels[far]] -= 1;
            labels[far] = c;
            sizes[c] = 1;
            changed = true;
        }
        cents = centroids(&x, &labels, k);
        trace.push(objective(&x, &labels, &cents));
        if !changed {
            break;
        }
    }
    Ok(ClusterAssignment {
        k,
        labels,
        centroids: cents,
        objective: trace,
    })
}

/// Agglomerative clustering with average linkage on `1 - cos`. Ties merge
/// the lexicographically smallest pair of cluster slots; final ids follow
/// each cluster's smallest member row.
pub fn hierarchical_cosine(emb: &EmbeddingTable, k: usize) -> Result<ClusterAssignment> {
    let x = unit_rows(emb)?;
    let n = x.len();
    check_k(n, k)?;
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = 1.0 - dot(&x[i], &x[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut size = vec![1usize; n];
    let mut alive = vec![true; n];
    let mut owner: Vec<usize> = (0..n).collect();
    for _ in 0..n - k {
        let mut best = (usize::MAX, usize::MAX);
        let mut best_d = f64::INFINITY;
        for i in 0..n {
            if !alive[i] {
                continue;
            }
            for j in i + 1..n {
                if alive[j] && dist[i * n + j] < best_d {
                    best_d = dist[i * n + j];
                    best = (i, j);
                }
            }
        }
        let (a, b) = best;
        // Lance-Williams update for average linkage
        for m in 0..n {
            if alive[m] && m != a && m != b {
                let d = (size[a] as f64 * dist[a * n + m] + size[b] as f64 * dist[b * n + m])
                    / (size[a] + size[b]) as f64;
                dist[a * n + m] = d;
                dist[m * n + a] = d;
            }
        }
        size[a] += size[b];
        alive[b] = false;
        owner.iter_mut().filter(|o| **o == b).for_each(|o| *o = a);
    }
    let mut ids = vec![usize::MAX; n];
    let mut next = 0;
    let mut labels = vec![0; n];
    for i in 0..n {
        let o = owner[i];
        if ids[o] == usize::MAX {
            ids[o] = next;
            next += 1;
        }
        labels[i] = ids[o];
    }
    let cents = centroids(&x, &labels, k);
    let obj = objective(&x, &labels, &cents);
    Ok(ClusterAssignment {
        k,
        labels,
        centroids: cents,
        objective: vec![obj],
    })
}

pub fn cluster(emb: &EmbeddingTable, algo: Algorithm, k: usize, seed: u64, max_iters: usize) -> Result<ClusterAssignment> {
    match algo {
        Algorithm::Kmeans => kmeans_cosine(emb, k, seed, max_iters),
        Algorithm::Hierarchical => hierarchical_cosine(emb, k),
    }
}
