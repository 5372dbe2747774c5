//! Low-dimensional image embeddings: t-SNE, a variational autoencoder and an
//! adversarial autoencoder.

mod aae;
mod tsne;
mod vae;

pub use aae::{aae_disc_loss, aae_embed, aae_gen_loss, aae_train, AaeModel};
pub use tsne::{
    conditional_affinities, joint_affinities, kl_divergence, student_t_affinities, tsne_embed, TsneConfig, TsneOutcome,
    TsneState,
};
pub use vae::{vae_embed, vae_terms, vae_train, VaeModel, VaeTerms};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Container, LayerSpec, Network, OptimizerState, Tape, Tensor, Var};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Tsne,
    Vae,
    Aae,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Tsne => "tsne",
            Method::Vae => "vae",
            Method::Aae => "aae",
        }
    }
}

/// One vector per image, keyed by the image's index in the dataset that was
/// embedded.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    method: Method,
    indices: Vec<usize>,
    values: Tensor,
}

#[derive(Serialize, Deserialize)]
struct TableHeader {
    method: Method,
    indices: Vec<usize>,
}

impl EmbeddingTable {
    pub fn new(method: Method, indices: Vec<usize>, values: Tensor) -> Result<Self> {
        if values.shape().len() != 2 || values.rows() != indices.len() {
            return Err(invalid(format!(
                "{} indices for embedding matrix of shape {:?}",
                indices.len(),
                values.shape()
            )));
        }
        if !values.all_finite() {
            return Err(invalid("embedding contains non-finite values"));
        }
        let mut seen = indices.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("embedding indices must be unique"));
        }
        Ok(EmbeddingTable {
            method,
            indices,
            values,
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn dim(&self) -> usize {
        self.values.row_len()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Vector of the `i`-th row (not image index `i`).
    pub fn row(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }

    /// Vector for image index `image`, if present.
    pub fn get(&self, image: usize) -> Option<&[f64]> {
        self.indices
            .iter()
            .position(|&i| i == image)
            .map(|r| self.values.row(r))
    }

    /// Table restricted to the given row positions.
    pub fn select(&self, rows: &[usize]) -> Result<EmbeddingTable> {
        if rows.is_empty() {
            return Err(invalid("cannot select zero rows"));
        }
        Ok(EmbeddingTable {
            method: self.method,
            indices: rows.iter().map(|&r| self.indices[r]).collect(),
            values: self.values.gather_rows(rows),
        })
    }

    /// CSV with header `index,dim0,dim1,...`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["index".to_string()];
        header.extend((0..self.dim()).map(|d| format!("dim{d}")));
        w.write_record(&header)?;
        for (r, &idx) in self.indices.iter().enumerate() {
            let mut rec = vec![idx.to_string()];
            rec.extend(self.values.row(r).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>, method: Method) -> Result<EmbeddingTable> {
        let mut r = csv::Reader::from_path(path)?;
        let mut indices = Vec::new();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let mut it = rec.iter();
            let idx = it
                .next()
                .ok_or_else(|| invalid("empty embedding row"))?
                .parse()
                .map_err(|e| invalid(format!("bad index: {e}")))?;
            let row = it
                .map(|s| s.parse::<f64>().map_err(|e| invalid(format!("bad value {s:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            indices.push(idx);
            rows.push(row);
        }
        EmbeddingTable::new(method, indices, Tensor::from_rows(&rows)?)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(
            "embedding",
            TableHeader {
                method: self.method,
                indices: self.indices.clone(),
            },
        )?;
        c.push("values", self.values.clone());
        Ok(c)
    }

    pub fn from_container(c: Container) -> Result<EmbeddingTable> {
        let c = c.expect_kind("embedding")?;
        let h: TableHeader = c.header_as()?;
        let values = c
            .tensor("values")
            .ok_or_else(|| invalid("embedding container has no `values` tensor"))?
            .clone();
        EmbeddingTable::new(h.method, h.indices, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
        EmbeddingTable::from_container(Container::read(path)?)
    }
}

/// Named loss components. Inactive components stay at zero, so `total`
/// always equals [`sum`](Self::sum).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub supervised: f64,
    pub neighbor: f64,
    /// Negative log-likelihood of the input under the decoder.
    pub likelihood: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub adversarial_d: f64,
    pub adversarial_g: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn sum(&self) -> f64 {
        self.supervised
            + self.neighbor
            + self.likelihood
            + self.reconstruction
            + self.kl
            + self.adversarial_d
            + self.adversarial_g
    }

    /// Set `total` from the components.
    pub fn with_total(mut self) -> Self {
        self.total = self.sum();
        self
    }

    pub fn is_finite(&self) -> bool {
        [
            self.supervised,
            self.neighbor,
            self.likelihood,
            self.reconstruction,
            self.kl,
            self.adversarial_d,
            self.adversarial_g,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub(crate) fn add_scaled(&mut self, other: &LossBreakdown, c: f64) {
        self.supervised += c * other.supervised;
        self.neighbor += c * other.neighbor;
        self.likelihood += c * other.likelihood;
        self.reconstruction += c * other.reconstruction;
        self.kl += c * other.kl;
        self.adversarial_d += c * other.adversarial_d;
        self.adversarial_g += c * other.adversarial_g;
        self.total += c * other.total;
    }
}

/// Shared settings for the two autoencoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoencoderConfig {
    pub latent: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            latent: 128,
            hidden: 256,
            epochs: 20,
            lr: 1e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl AutoencoderConfig {
    pub(crate) fn validate(&self) -> Result<()> {
        if self.latent == 0 || self.hidden == 0 || self.batch_size == 0 {
            return Err(invalid("latent, hidden and batch_size must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(invalid(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// `in -> hidden (relu) -> out` dense stack.
pub(crate) fn mlp(input: usize, hidden: usize, out: usize, rng: &mut impl rand::Rng) -> Result<Network> {
    Network::new(
        vec![input],
        vec![
            LayerSpec::Dense { units: hidden },
            LayerSpec::Relu,
            LayerSpec::Dense { units: out },
        ],
        1,
        rng,
    )
}

/// Mean over rows of `(sigmoid(logits) - x)^2`, averaged per element.
pub(crate) fn mse_from_logits(tape: &mut Tape, logits: Var, x: Var) -> Result<Var> {
    let r = tape.sigmoid(logits);
    let d = tape.sub(r, x)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Squared Euclidean distance between `x` and `sigmoid(logits)` per row,
/// averaged over rows.
pub(crate) fn sq_dist_from_logits(tape: &mut Tape, logits: Var, x: Var) -> Result<Var> {
    let n = tape.value(x).rows() as f64;
    let r = tape.sigmoid(logits);
    let d = tape.sub(r, x)?;
    let sq = tape.square(d);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / n))
}

/// Run a backward pass and update each `(network, bound params, optimizer)`
/// triple from the same gradients.
pub(crate) fn step_all(
    tape: &mut Tape,
    loss: Var,
    parts: &mut [(&mut Network, &[Var], &mut OptimizerState)],
) -> Result<()> {
    let mut grads = tape.backward(loss)?;
    for (net, vars, opt) in parts.iter_mut() {
        let g: Vec<Option<Tensor>> = vars.iter().map(|&v| grads.take(v)).collect();
        opt.apply(net.params_mut(), &g)?;
    }
    Ok(())
}

/// Encoder output for every row of `x`, in chunks.
pub(crate) fn encode_all(net: &Network, x: &Tensor) -> Result<Tensor> {
    net.predict(x, 256)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> EmbeddingTable {
        let v = Tensor::from_rows(&[vec![0.1, -2.5], vec![1.0 / 3.0, 7e-12], vec![3.0, 4.0]]).unwrap();
        EmbeddingTable::new(Method::Vae, vec![4, 0, 9], v).unwrap()
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let t = table();
        t.write_csv(dir.path().join("e.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("e.csv")).unwrap();
        assert!(text.starts_with("index,dim0,dim1\n4,"));
        let back = EmbeddingTable::read_csv(dir.path().join("e.csv"), Method::Vae).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn container_round_trip() {
        let t = table();
        let back = EmbeddingTable::from_container(Container::from_bytes(&t.to_container().unwrap().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.get(9), Some(&[3.0, 4.0][..]));
    }

    #[test]
    fn duplicate_indices_rejected() {
        let v = Tensor::zeros(&[2, 2]);
        assert!(EmbeddingTable::new(Method::Tsne, vec![1, 1], v).is_err());
    }

    #[test]
    fn breakdown_total_is_component_sum() {
        let b = LossBreakdown {
            likelihood: 3.0,
            kl: 0.25,
            reconstruction: 0.125,
            ..Default::default()
        }
        .with_total();
        assert_eq!(b.total, 3.375);
    }
}
