use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use super::{encode_all, mlp, mse_from_logits, step_all, AutoencoderConfig, EmbeddingTable, LossBreakdown, Method};
use crate::diffcore::{Bound, Network, OptimizerState, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::rng::{stream, Stream};

/// Encoder emitting `[mu | logvar]` and a decoder emitting pixel logits.
#[derive(Clone, Debug)]
pub struct VaeModel {
    pub encoder: Network,
    pub decoder: Network,
    pub latent: usize,
    /// Mean loss components per epoch.
    pub history: Vec<LossBreakdown>,
}

/// Loss nodes recorded by [`vae_terms`].
#[derive(Clone, Copy, Debug)]
pub struct VaeTerms {
    pub likelihood: Var,
    pub kl: Var,
    pub reconstruction: Var,
    pub total: Var,
}

impl VaeTerms {
    pub fn values(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            likelihood: tape.scalar(self.likelihood),
            kl: tape.scalar(self.kl),
            reconstruction: tape.scalar(self.reconstruction),
            total: tape.scalar(self.total),
            ..Default::default()
        }
    }
}

/// Record the VAE objective for a batch `x` given encoder outputs `mu`,
/// `logvar` and frozen standard-normal `noise`, all `(n, latent)`.
///
/// * likelihood: Bernoulli negative log-likelihood of `x` under the decoder,
///   summed over pixels and averaged over the batch
/// * kl: closed-form `KL(N(mu, exp(logvar)) || N(0, I))`, batch mean
/// * reconstruction: mean squared error between `x` and the decoded image
pub fn vae_terms(
    tape: &mut Tape,
    decoder: &Network,
    dec: &Bound,
    x: Var,
    mu: Var,
    logvar: Var,
    noise: Var,
) -> Result<VaeTerms> {
    let n = tape.value(x).rows() as f64;
    let half = tape.scale(logvar, 0.5);
    let std = tape.exp(half);
    let spread = tape.mul(std, noise)?;
    let z = tape.add(mu, spread)?;
    let logits = decoder.forward(tape, dec, z)?.output;

    // -log p(x|z) = softplus(l) - x * l for a Bernoulli with logit l
    let sp = tape.softplus(logits);
    let xl = tape.mul(x, logits)?;
    let nll = tape.sub(sp, xl)?;
    let nll = tape.sum(nll);
    let likelihood = tape.scale(nll, 1.0 / n);

    let one_plus = tape.add_scalar(logvar, 1.0);
    let mu2 = tape.square(mu);
    let var = tape.exp(logvar);
    let a = tape.sub(one_plus, mu2)?;
    let inner = tape.sub(a, var)?;
    let inner = tape.sum(inner);
    let kl = tape.scale(inner, -0.5 / n);

    let reconstruction = mse_from_logits(tape, logits, x)?;
    let t = tape.add(likelihood, kl)?;
    let total = tape.add(t, reconstruction)?;
    Ok(VaeTerms {
        likelihood,
        kl,
        reconstruction,
        total,
    })
}

fn split_mu_logvar(tape: &mut Tape, h: Var, latent: usize) -> Result<(Var, Var)> {
    Ok((tape.slice_cols(h, 0, latent)?, tape.slice_cols(h, latent, latent)?))
}

/// Train on the rows of `x` (`(n, pixels)`, values in `[0, 1]`).
pub fn vae_train(x: &Tensor, cfg: &AutoencoderConfig) -> Result<VaeModel> {
    cfg.validate()?;
    if x.shape().len() != 2 {
        return Err(invalid(format!("VAE expects flattened images, got shape {:?}", x.shape())));
    }
    let (n, d) = (x.rows(), x.row_len());
    let latent = cfg.latent;
    let mut init = stream(cfg.seed, Stream::Init);
    let mut encoder = mlp(d, cfg.hidden, 2 * latent, &mut init)?;
    let mut decoder = mlp(latent, cfg.hidden, d, &mut init)?;
    let mut opt_e = OptimizerState::adam(cfg.lr)?;
    let mut opt_d = OptimizerState::adam(cfg.lr)?;
    let mut rng = stream(cfg.seed, Stream::Embed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = LossBreakdown::default();
        let mut seen = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = x.gather_rows(chunk);
            let eps: Vec<f64> = (0..chunk.len() * latent).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut tape = Tape::new();
            let be = encoder.bind(&mut tape);
            let bd = decoder.bind(&mut tape);
            let xv = tape.leaf(batch);
            let noise = tape.leaf(Tensor::new(vec![chunk.len(), latent], eps)?);
            let h = encoder.forward(&mut tape, &be, xv)?.output;
            let (mu, logvar) = split_mu_logvar(&mut tape, h, latent)?;
            let terms = vae_terms(&mut tape, &decoder, &bd, xv, mu, logvar, noise)?;
            let values = terms.values(&tape);
            if !values.is_finite() {
                return Err(Error::NonFinite {
                    stage: "vae_train",
                    epoch,
                    step,
                });
            }
            acc.add_scaled(&values, chunk.len() as f64);
            seen += chunk.len() as f64;
            step_all(
                &mut tape,
                terms.total,
                &mut [
                    (&mut encoder, be.vars(), &mut opt_e),
                    (&mut decoder, bd.vars(), &mut opt_d),
                ],
            )?;
        }
        let mut mean = LossBreakdown::default();
        mean.add_scaled(&acc, 1.0 / seen);
        history.push(mean);
    }
    Ok(VaeModel {
        encoder,
        decoder,
        latent,
        history,
    })
}

/// Encoder means for each row of `x`.
pub fn vae_embed(model: &VaeModel, x: &Tensor, indices: &[usize]) -> Result<EmbeddingTable> {
    let h = encode_all(&model.encoder, x)?;
    let mu: Vec<Vec<f64>> = (0..h.rows()).map(|i| h.row(i)[..model.latent].to_vec()).collect();
    EmbeddingTable::new(Method::Vae, indices.to_vec(), Tensor::from_rows(&mu)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn prior_match_gives_zero_kl() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let dec = mlp(2, 4, 3, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bd = dec.bind(&mut tape);
        let x = tape.leaf(Tensor::full(&[2, 3], 0.5));
        let mu = tape.leaf(Tensor::zeros(&[2, 2]));
        let lv = tape.leaf(Tensor::zeros(&[2, 2]));
        let noise = tape.leaf(Tensor::full(&[2, 2], 0.3));
        let t = vae_terms(&mut tape, &dec, &bd, x, mu, lv, noise).unwrap();
        assert_eq!(tape.scalar(t.kl), 0.0);
        let v = t.values(&tape);
        assert!((v.total - v.sum()).abs() < 1e-12);
    }

    #[test]
    fn kl_is_positive_off_prior() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let dec = mlp(1, 2, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bd = dec.bind(&mut tape);
        let x = tape.leaf(Tensor::full(&[1, 2], 0.5));
        let mu = tape.leaf(Tensor::full(&[1, 1], 1.0));
        let lv = tape.leaf(Tensor::full(&[1, 1], 0.0));
        let noise = tape.leaf(Tensor::zeros(&[1, 1]));
        let t = vae_terms(&mut tape, &dec, &bd, x, mu, lv, noise).unwrap();
        // 0.5 * mu^2 for unit variance
        assert!((tape.scalar(t.kl) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn short_training_is_finite_and_deterministic() {
        let rows: Vec<Vec<f64>> = (0..12).map(|i| (0..16).map(|j| ((i * j) % 7) as f64 / 7.0).collect()).collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let cfg = AutoencoderConfig {
            latent: 3,
            hidden: 8,
            epochs: 3,
            batch_size: 5,
            ..Default::default()
        };
        let a = vae_train(&x, &cfg).unwrap();
        let b = vae_train(&x, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 3);
        let emb = vae_embed(&a, &x, &(0..12).collect::<Vec<_>>()).unwrap();
        assert_eq!(emb.dim(), 3);
        for h in &a.history {
            assert!(h.kl >= 0.0);
            assert!((h.total - h.sum()).abs() < 1e-9);
        }
    }
}
