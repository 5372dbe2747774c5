use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{EmbeddingTable, Method};
use crate::diffcore::Tensor;
use crate::error::{invalid, Result};
use crate::rng::{stream, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneConfig {
    pub dim: usize,
    pub perplexity: f64,
    pub iters: usize,
    pub learning_rate: f64,
    /// Factor applied to P during the first quarter of the iterations.
    pub exaggeration: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            dim: 2,
            perplexity: 30.0,
            iters: 500,
            learning_rate: 200.0,
            exaggeration: 4.0,
            seed: 0,
        }
    }
}

/// Affinities and map points of a t-SNE run; matrices are dense `n * n`
/// row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TsneState {
    pub n: usize,
    pub dim: usize,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub y: Vec<f64>,
    /// Gaussian bandwidth found for each point.
    pub sigma: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TsneOutcome {
    pub table: EmbeddingTable,
    pub initial_kl: f64,
    pub final_kl: f64,
    pub state: TsneState,
}

fn sq_dists(x: &Tensor) -> Vec<f64> {
    let n = x.rows();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    }
    d
}

/// Fill `row` with `exp(-beta * d)` over the other points, normalized, and
/// return its Shannon entropy (nats).
fn gaussian_row(d: &[f64], i: usize, beta: f64, row: &mut [f64]) -> f64 {
    let dmin = d
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    let mut wsum = 0.0;
    for (j, (&dj, r)) in d.iter().zip(row.iter_mut()).enumerate() {
        if j == i {
            *r = 0.0;
            continue;
        }
        let shifted = dj - dmin;
        *r = (-beta * shifted).exp();
        sum += *r;
        wsum += *r * shifted;
    }
    for r in row.iter_mut() {
        *r /= sum;
    }
    sum.ln() + beta * wsum / sum
}

/// Conditional affinities `p(j|i)` with each row's bandwidth tuned by
/// bisection so its perplexity matches `perplexity`.
pub fn conditional_affinities(x: &Tensor, perplexity: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = x.rows();
    check_feasible(n, perplexity)?;
    let d = sq_dists(x);
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    let mut sigma = vec![0.0; n];
    for i in 0..n {
        let di = &d[i * n..(i + 1) * n];
        let row = &mut p[i * n..(i + 1) * n];
        let (mut lo, mut hi) = (0.0_f64, f64::INFINITY);
        let mut beta = 1.0;
        for _ in 0..200 {
            let h = gaussian_row(di, i, beta, row);
            if (h - target).abs() < 1e-10 {
                break;
            }
            // entropy falls as beta rises
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        gaussian_row(di, i, beta, row);
        sigma[i] = (1.0 / (2.0 * beta)).sqrt();
    }
    Ok((p, sigma))
}

fn check_feasible(n: usize, perplexity: f64) -> Result<()> {
    if !(perplexity > 0.0) || n < 2 || (n as f64) < 3.0 * perplexity {
        return Err(invalid(format!(
            "perplexity {perplexity} is infeasible for {n} points (need n >= 3 * perplexity)"
        )));
    }
    Ok(())
}

/// Symmetric joint affinities `(p(j|i) + p(i|j)) / 2n` and the bandwidths.
pub fn joint_affinities(x: &Tensor, perplexity: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = x.rows();
    let (c, sigma) = conditional_affinities(x, perplexity)?;
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (c[i * n + j] + c[j * n + i]) / (2.0 * n as f64);
        }
    }
    Ok((p, sigma))
}

/// Student-t affinities of map points `y` (`n * dim`) and the unnormalized
/// kernel values.
fn student_t(y: &[f64], n: usize, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut num = vec![0.0; n * n];
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = (0..dim)
                .map(|k| {
                    let t = y[i * dim + k] - y[j * dim + k];
                    t * t
                })
                .sum();
            let v = 1.0 / (1.0 + d2);
            num[i * n + j] = v;
            num[j * n + i] = v;
            total += 2.0 * v;
        }
    }
    let q = num.iter().map(|v| v / total).collect();
    (q, num)
}

pub fn student_t_affinities(y: &[f64], n: usize, dim: usize) -> Vec<f64> {
    student_t(y, n, dim).0
}

/// `sum p * ln(p / q)`, with `0 * ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(invalid(format!("KL over {} and {} entries", p.len(), q.len())));
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(invalid(format!("q is zero at entry {i} where p = {pi}")));
            }
            kl += pi * (pi / qi).ln();
        }
    }
    Ok(kl)
}

/// Exact t-SNE of the rows of `vectors`; `indices` name the rows in the
/// output table.
pub fn tsne_embed(vectors: &Tensor, indices: &[usize], cfg: &TsneConfig) -> Result<TsneOutcome> {
    let n = vectors.rows();
    if indices.len() != n {
        return Err(invalid(format!("{} indices for {n} vectors", indices.len())));
    }
    if cfg.dim == 0 || cfg.iters == 0 || !(cfg.learning_rate > 0.0) {
        return Err(invalid("t-SNE needs dim, iters and learning_rate > 0"));
    }
    let (p, sigma) = joint_affinities(vectors, cfg.perplexity)?;
    let dim = cfg.dim;
    let mut rng = stream(cfg.seed, Stream::Embed);
    let init = Normal::new(0.0, 1e-4).expect("normal");
    let mut y: Vec<f64> = (0..n * dim).map(|_| init.sample(&mut rng)).collect();
    let initial_kl = kl_divergence(&p, &student_t_affinities(&y, n, dim))?;

    let mut update = vec![0.0; n * dim];
    let mut gains = vec![1.0_f64; n * dim];
    let mut grad = vec![0.0; n * dim];
    let early = cfg.iters / 4;
    for it in 0..cfg.iters {
        let (exag, momentum) = if it < early {
            (cfg.exaggeration, 0.5)
        } else {
            (1.0, 0.8)
        };
        let (q, num) = student_t(&y, n, dim);
        grad.iter_mut().for_each(|g| *g = 0.0);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let m = 4.0 * (exag * p[i * n + j] - q[i * n + j]) * num[i * n + j];
                for k in 0..dim {
                    grad[i * dim + k] += m * (y[i * dim + k] - y[j * dim + k]);
                }
            }
        }
        for idx in 0..n * dim {
            gains[idx] = if (grad[idx] > 0.0) != (update[idx] > 0.0) {
                gains[idx] + 0.2
            } else {
                (gains[idx] * 0.8).max(0.01)
            };
            update[idx] = momentum * update[idx] - cfg.learning_rate * gains[idx] * grad[idx];
            y[idx] += update[idx];
        }
        for k in 0..dim {
            let mean = (0..n).map(|i| y[i * dim + k]).sum::<f64>() / n as f64;
            for i in 0..n {
                y[i * dim + k] -= mean;
            }
        }
    }
    let q = student_t_affinities(&y, n, dim);
    let final_kl = kl_divergence(&p, &q)?;
    let table = EmbeddingTable::new(Method::Tsne, indices.to_vec(), Tensor::new(vec![n, dim], y.clone())?)?;
    Ok(TsneOutcome {
        table,
        initial_kl,
        final_kl,
        state: TsneState {
            n,
            dim,
            p,
            q,
            y,
            sigma,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_hand_value() {
        let kl = kl_divergence(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl - expected).abs() < 1e-15);
        assert!((kl - 0.5108).abs() < 1e-4);
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).is_err());
        assert_eq!(kl_divergence(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn conditional_rows_hit_perplexity() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![(i as f64).sin() * 3.0, (i as f64 * 0.37).cos()]).collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let (c, _) = conditional_affinities(&x, 10.0).unwrap();
        for i in 0..40 {
            let row = &c[i * 40..(i + 1) * 40];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let h: f64 = -row.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
            assert!((h.exp() - 10.0).abs() < 1e-6, "row {i}: {}", h.exp());
        }
        let (p, _) = joint_affinities(&x, 10.0).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..40 {
            assert_eq!(p[i * 40 + i], 0.0);
            for j in 0..40 {
                assert_eq!(p[i * 40 + j], p[j * 40 + i]);
            }
        }
    }

    #[test]
    fn infeasible_perplexity() {
        let x = Tensor::zeros(&[10, 3]);
        assert!(tsne_embed(&x, &(0..10).collect::<Vec<_>>(), &TsneConfig::default()).is_err());
    }

    #[test]
    fn identical_pair_attracts() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let cfg = TsneConfig {
            perplexity: 0.5,
            iters: 40,
            // with two points the gradient is 6 * (y_i - y_j) while
            // exaggerated; a small step keeps the pair from overshooting
            learning_rate: 0.01,
            ..Default::default()
        };
        let out = tsne_embed(&x, &[0, 1], &cfg).unwrap();
        // replay the initial draw to get the starting distance
        let mut rng = stream(cfg.seed, Stream::Embed);
        let init = Normal::new(0.0, 1e-4).unwrap();
        let y0: Vec<f64> = (0..4).map(|_| init.sample(&mut rng)).collect();
        let d0 = ((y0[0] - y0[2]).powi(2) + (y0[1] - y0[3]).powi(2)).sqrt();
        let y = &out.state.y;
        let d1 = ((y[0] - y[2]).powi(2) + (y[1] - y[3]).powi(2)).sqrt();
        assert!(d1 < d0, "{d1} !< {d0}");
    }
}
