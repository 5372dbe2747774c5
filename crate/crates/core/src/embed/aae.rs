use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use super::{encode_all, mlp, sq_dist_from_logits, step_all, AutoencoderConfig, EmbeddingTable, LossBreakdown, Method};
use crate::diffcore::{Bound, Network, OptimizerState, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::rng::{stream, Stream};

/// Deterministic encoder, pixel-logit decoder and a latent-space
/// discriminator emitting one logit per row. The prior is `N(0, I)`.
#[derive(Clone, Debug)]
pub struct AaeModel {
    pub encoder: Network,
    pub decoder: Network,
    pub discriminator: Network,
    pub latent: usize,
    pub history: Vec<LossBreakdown>,
}

/// `-mean log D(z_prior) - mean log(1 - D(z_enc))` from discriminator logits.
pub fn aae_disc_loss(tape: &mut Tape, disc: &Network, bound: &Bound, z_prior: Var, z_enc: Var) -> Result<Var> {
    let lp = disc.forward(tape, bound, z_prior)?.output;
    let le = disc.forward(tape, bound, z_enc)?.output;
    // -log sigmoid(l) = softplus(-l); -log(1 - sigmoid(l)) = softplus(l)
    let neg = tape.scale(lp, -1.0);
    let real = tape.softplus(neg);
    let real = tape.mean(real);
    let fake = tape.softplus(le);
    let fake = tape.mean(fake);
    tape.add(real, fake)
}

/// Non-saturating generator loss `-mean log D(z_enc)`.
pub fn aae_gen_loss(tape: &mut Tape, disc: &Network, bound: &Bound, z_enc: Var) -> Result<Var> {
    let le = disc.forward(tape, bound, z_enc)?.output;
    let neg = tape.scale(le, -1.0);
    let g = tape.softplus(neg);
    Ok(tape.mean(g))
}

/// Train with two updates per batch: the discriminator, then encoder and
/// decoder on reconstruction plus the generator loss.
pub fn aae_train(x: &Tensor, cfg: &AutoencoderConfig) -> Result<AaeModel> {
    cfg.validate()?;
    if x.shape().len() != 2 {
        return Err(invalid(format!("AAE expects flattened images, got shape {:?}", x.shape())));
    }
    let (n, d) = (x.rows(), x.row_len());
    let latent = cfg.latent;
    let mut init = stream(cfg.seed, Stream::Init);
    let mut encoder = mlp(d, cfg.hidden, latent, &mut init)?;
    let mut decoder = mlp(latent, cfg.hidden, d, &mut init)?;
    let mut discriminator = mlp(latent, cfg.hidden, 1, &mut init)?;
    let mut opt_e = OptimizerState::adam(cfg.lr)?;
    let mut opt_dec = OptimizerState::adam(cfg.lr)?;
    let mut opt_disc = OptimizerState::adam(cfg.lr)?;
    let mut rng = stream(cfg.seed, Stream::Embed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = LossBreakdown::default();
        let mut seen = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let m = chunk.len();
            let batch = x.gather_rows(chunk);
            let mut parts = LossBreakdown::default();

            // discriminator on prior samples against current codes
            let z_enc = encoder.forward_values(&batch)?.0;
            let prior: Vec<f64> = (0..m * latent).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut tape = Tape::new();
            let bdisc = discriminator.bind(&mut tape);
            let zp = tape.leaf(Tensor::new(vec![m, latent], prior)?);
            let ze = tape.leaf(z_enc);
            let ld = aae_disc_loss(&mut tape, &discriminator, &bdisc, zp, ze)?;
            parts.adversarial_d = tape.scalar(ld);
            discriminator.backward_and_step(&mut tape, &bdisc, ld, &mut opt_disc)?;

            // encoder and decoder on reconstruction plus fooling the
            // discriminator; the discriminator's gradients are discarded
            let mut tape = Tape::new();
            let be = encoder.bind(&mut tape);
            let bd = decoder.bind(&mut tape);
            let bdisc = discriminator.bind(&mut tape);
            let xv = tape.leaf(batch);
            let z = encoder.forward(&mut tape, &be, xv)?.output;
            let logits = decoder.forward(&mut tape, &bd, z)?.output;
            let rec = sq_dist_from_logits(&mut tape, logits, xv)?;
            let lg = aae_gen_loss(&mut tape, &discriminator, &bdisc, z)?;
            parts.reconstruction = tape.scalar(rec);
            parts.adversarial_g = tape.scalar(lg);
            let loss = tape.add(rec, lg)?;
            step_all(
                &mut tape,
                loss,
                &mut [
                    (&mut encoder, be.vars(), &mut opt_e),
                    (&mut decoder, bd.vars(), &mut opt_dec),
                ],
            )?;

            let parts = parts.with_total();
            if !parts.is_finite() {
                return Err(Error::NonFinite {
                    stage: "aae_train",
                    epoch,
                    step,
                });
            }
            acc.add_scaled(&parts, m as f64);
            seen += m as f64;
        }
        let mut mean = LossBreakdown::default();
        mean.add_scaled(&acc, 1.0 / seen);
        history.push(mean);
    }
    Ok(AaeModel {
        encoder,
        decoder,
        discriminator,
        latent,
        history,
    })
}

pub fn aae_embed(model: &AaeModel, x: &Tensor, indices: &[usize]) -> Result<EmbeddingTable> {
    let z = encode_all(&model.encoder, x)?;
    EmbeddingTable::new(Method::Aae, indices.to_vec(), z)
}
