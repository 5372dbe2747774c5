//! Graph-regularized and plain supervised training of a [`Network`].
//!
//! A graph step forwards a batch of seed images and, separately, all of
//! their neighbors through the same bound parameters. The objective is
//!
//! ```text
//! total = CE(seed logits, seed labels) + alpha / B * sum_j w_j * d(h(seed_j), h(neighbor_j))
//! ```
//!
//! with `h` the activation of the network's tap layer and `B` the number of
//! seeds in the batch. Neighbors carry no label loss.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::diffcore::{Bound, Network, OptimizerKind, OptimizerState, Tape, Tensor, Var};
use crate::embed::LossBreakdown;
use crate::error::{invalid, Error, Result};
use crate::graph::{NodeImageMap, SimilarityGraph};
use crate::rng::{stream, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    SquaredL2,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_neighbors: usize,
    pub metric: Distance,
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub alpha: f64,
    /// Seeds per optimizer step.
    pub batch_size: usize,
    /// Also train on images the graph filtered out, without a neighbor term.
    pub include_filtered: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_neighbors: 5,
            metric: Distance::SquaredL2,
            epochs: 20,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            alpha: 1.0,
            batch_size: 16,
            include_filtered: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_neighbors == 0 {
            return Err(invalid("max_neighbors must be at least 1"));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(invalid(format!("alpha {} must be finite and >= 0", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(invalid(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// One seed and its strongest neighbors.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphBatch {
    /// `None` for a filtered image trained without neighbors.
    pub seed_node: Option<usize>,
    pub seed_image: usize,
    pub label: usize,
    pub neighbor_nodes: Vec<usize>,
    pub neighbor_images: Vec<usize>,
    pub weights: Vec<f64>,
}

/// All seed nodes in random order, each with its top-`n` non-mean neighbors
/// by edge weight (ties broken by lower node id).
pub fn sample_epoch(g: &SimilarityGraph, map: &NodeImageMap, n: usize, rng: &mut impl Rng) -> Vec<GraphBatch> {
    let adj = g.adjacency();
    let mut seeds: Vec<usize> = g.seed_nodes().map(|s| s.id).collect();
    seeds.shuffle(rng);
    seeds
        .into_iter()
        .map(|s| {
            let mut nb: Vec<(usize, f64)> = adj[s]
                .iter()
                .copied()
                .filter(|&(v, _)| map.image(v).is_some())
                .collect();
            nb.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            nb.truncate(n);
            GraphBatch {
                seed_node: Some(s),
                seed_image: map.image(s).expect("seed nodes map to images"),
                label: g.nodes[s].class,
                neighbor_images: nb.iter().map(|&(v, _)| map.image(v).expect("filtered above")).collect(),
                neighbor_nodes: nb.iter().map(|&(v, _)| v).collect(),
                weights: nb.iter().map(|&(_, w)| w).collect(),
            }
        })
        .collect()
}

fn distance(a: &[f64], b: &[f64], metric: Distance) -> f64 {
    match metric {
        Distance::SquaredL2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
        Distance::Cosine => {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = (a.iter().map(|x| x * x).sum::<f64>() + COS_EPS).sqrt();
            let nb = (b.iter().map(|x| x * x).sum::<f64>() + COS_EPS).sqrt();
            1.0 - d / (na * nb)
        }
    }
}

/// Added to squared norms in the cosine distance so all-zero activations
/// stay finite.
pub const COS_EPS: f64 = 1e-12;

/// `sum_j w_j * d(seed, neighbors[j])`.
pub fn neighbor_loss(seed: &[f64], neighbors: &[Vec<f64>], weights: &[f64], metric: Distance) -> Result<f64> {
    if neighbors.len() != weights.len() {
        return Err(invalid(format!("{} neighbors but {} weights", neighbors.len(), weights.len())));
    }
    let mut total = 0.0;
    for (nb, w) in neighbors.iter().zip(weights) {
        if nb.len() != seed.len() {
            return Err(Error::Shape {
                op: "neighbor_loss",
                expected: vec![seed.len()],
                found: vec![nb.len()],
            });
        }
        total += w * distance(seed, nb, metric);
    }
    Ok(total)
}

/// Tape version of [`neighbor_loss`] over row pairs: `a` and `b` are
/// `(m, f)`, `weights` is `(m)`; returns `sum_i w_i * d(a_i, b_i)`.
pub fn record_neighbor_loss(tape: &mut Tape, a: Var, b: Var, weights: Var, metric: Distance) -> Result<Var> {
    let d = match metric {
        Distance::SquaredL2 => {
            let diff = tape.sub(a, b)?;
            tape.row_dot(diff, diff)?
        }
        Distance::Cosine => {
            let dot = tape.row_dot(a, b)?;
            let aa = tape.row_dot(a, a)?;
            let aa = tape.add_scalar(aa, COS_EPS);
            let na = tape.sqrt(aa);
            let bb = tape.row_dot(b, b)?;
            let bb = tape.add_scalar(bb, COS_EPS);
            let nb = tape.sqrt(bb);
            let denom = tape.mul(na, nb)?;
            let cos = tape.div(dot, denom)?;
            let neg = tape.scale(cos, -1.0);
            tape.add_scalar(neg, 1.0)
        }
    };
    let wd = tape.mul(d, weights)?;
    Ok(tape.sum(wd))
}

/// Inputs of one optimizer step.
#[derive(Clone, Debug)]
pub struct StepInput {
    pub seeds: Tensor,
    pub labels: Vec<usize>,
    /// All neighbors of the step's seeds, stacked.
    pub neighbors: Option<Tensor>,
    /// For each neighbor row, the position of its seed in `seeds`.
    pub owner: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Loss nodes of one step.
#[derive(Clone, Copy, Debug)]
pub struct StepTerms {
    pub logits: Var,
    pub supervised: Var,
    pub neighbor: Option<Var>,
    pub total: Var,
}

impl StepTerms {
    pub fn values(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            supervised: tape.scalar(self.supervised),
            neighbor: self.neighbor.map_or(0.0, |v| tape.scalar(v)),
            total: tape.scalar(self.total),
            ..Default::default()
        }
    }
}

/// Record the step objective. Without neighbors the total is the
/// cross-entropy node itself, which is exactly what the base trainer
/// minimizes.
pub fn total_loss(tape: &mut Tape, net: &Network, bound: &Bound, input: &StepInput, cfg: &TrainConfig) -> Result<StepTerms> {
    let xs = tape.leaf(input.seeds.clone());
    let fs = net.forward(tape, bound, xs)?;
    let supervised = tape.sparse_cross_entropy(fs.output, &input.labels)?;
    let Some(nbrs) = &input.neighbors else {
        return Ok(StepTerms {
            logits: fs.output,
            supervised,
            neighbor: None,
            total: supervised,
        });
    };
    if input.owner.len() != nbrs.rows() || input.weights.len() != nbrs.rows() {
        return Err(invalid("neighbor owner/weight lengths must match the neighbor rows"));
    }
    let xn = tape.leaf(nbrs.clone());
    let fnb = net.forward(tape, bound, xn)?;
    let hs = tape.flatten(fs.hidden)?;
    let hs = tape.gather_rows(hs, &input.owner)?;
    let hn = tape.flatten(fnb.hidden)?;
    let w = tape.leaf(Tensor::new(vec![input.weights.len()], input.weights.clone())?);
    let raw = record_neighbor_loss(tape, hs, hn, w, cfg.metric)?;
    let neighbor = tape.scale(raw, cfg.alpha / input.labels.len() as f64);
    let total = tape.add(supervised, neighbor)?;
    Ok(StepTerms {
        logits: fs.output,
        supervised,
        neighbor: Some(neighbor),
        total,
    })
}

/// Images at `idx` shaped for a network with `input_shape`.
pub fn batch_input(ds: &LabeledDataset, idx: &[usize], input_shape: &[usize]) -> Result<Tensor> {
    let (h, w) = ds.image_size().ok_or_else(|| invalid("empty dataset"))?;
    let t = match input_shape {
        [c, ih, iw] if *c == 1 && *ih == h && *iw == w => ds.image_tensor(idx)?,
        [f] if *f == h * w => ds.flat_tensor(idx)?,
        _ => {
            return Err(Error::Shape {
                op: "batch_input",
                expected: input_shape.to_vec(),
                found: vec![1, h, w],
            })
        }
    };
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub train_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub net: Network,
    pub history: Vec<EpochRecord>,
    pub config: TrainConfig,
    /// Seed image indices in the order they were visited, per epoch.
    pub orders: Vec<Vec<usize>>,
}

impl TrainedModel {
    /// CSV `epoch,supervised,neighbor,total,train_acc`.
    pub fn write_history(&self, path: impl AsRef<Path>) -> Result<()> {
        write_history(&self.history, path)
    }
}

pub fn write_history(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "supervised", "neighbor", "total", "train_acc"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            format!("{:?}", r.loss.supervised),
            format!("{:?}", r.loss.neighbor),
            format!("{:?}", r.loss.total),
            format!("{:?}", r.train_acc),
        ])?;
    }
    w.flush()?;
    Ok(())
}

struct EpochAcc {
    loss: LossBreakdown,
    seen: f64,
    correct: usize,
}

impl EpochAcc {
    fn new() -> Self {
        EpochAcc {
            loss: LossBreakdown::default(),
            seen: 0.0,
            correct: 0,
        }
    }

    fn finish(self, epoch: usize) -> EpochRecord {
        let mut loss = LossBreakdown::default();
        if self.seen > 0.0 {
            loss.add_scaled(&self.loss, 1.0 / self.seen);
        }
        EpochRecord {
            epoch,
            loss,
            train_acc: if self.seen > 0.0 { self.correct as f64 / self.seen } else { 0.0 },
        }
    }
}

fn run_step(
    net: &mut Network,
    opt: &mut OptimizerState,
    input: &StepInput,
    cfg: &TrainConfig,
    acc: &mut EpochAcc,
    at: (&'static str, usize, usize),
) -> Result<()> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let terms = total_loss(&mut tape, net, &bound, input, cfg)?;
    let values = terms.values(&tape);
    if !values.is_finite() {
        return Err(Error::NonFinite {
            stage: at.0,
            epoch: at.1,
            step: at.2,
        });
    }
    let b = input.labels.len() as f64;
    acc.loss.add_scaled(&values, b);
    acc.seen += b;
    let preds = tape.value(terms.logits).argmax_rows();
    acc.correct += preds.iter().zip(&input.labels).filter(|(p, l)| p == l).count();
    net.backward_and_step(&mut tape, &bound, terms.total, opt)
}

/// Graph-regularized training; `map` must send every seed node to an index
/// of `train` with the node's class as label.
pub fn train_graph_model(
    g: &SimilarityGraph,
    map: &NodeImageMap,
    train: &LabeledDataset,
    mut net: Network,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    for n in g.seed_nodes() {
        let img = map
            .image(n.id)
            .ok_or_else(|| invalid(format!("seed node {} has no image", n.id)))?;
        if img >= train.len() || train.get(img).label != n.class {
            return Err(invalid(format!(
                "graph node {} refers to image {img}, which is not a class-{} training image",
                n.id, n.class
            )));
        }
    }
    let extras: Vec<usize> = if cfg.include_filtered {
        let used: std::collections::BTreeSet<usize> = map.map.values().copied().collect();
        (0..train.len()).filter(|i| !used.contains(i)).collect()
    } else {
        Vec::new()
    };
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.lr)?;
    let mut rng = stream(cfg.seed, Stream::Sampler);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut orders = Vec::with_capacity(cfg.epochs);
    let shape = net.input_shape().to_vec();
    for epoch in 0..cfg.epochs {
        let mut batches = sample_epoch(g, map, cfg.max_neighbors, &mut rng);
        if !extras.is_empty() {
            batches.extend(extras.iter().map(|&i| GraphBatch {
                seed_node: None,
                seed_image: i,
                label: train.get(i).label,
                neighbor_nodes: vec![],
                neighbor_images: vec![],
                weights: vec![],
            }));
            batches.shuffle(&mut rng);
        }
        orders.push(batches.iter().map(|b| b.seed_image).collect());
        let mut acc = EpochAcc::new();
        for (step, chunk) in batches.chunks(cfg.batch_size).enumerate() {
            let seeds: Vec<usize> = chunk.iter().map(|b| b.seed_image).collect();
            let mut nb_idx = Vec::new();
            let mut owner = Vec::new();
            let mut weights = Vec::new();
            for (pos, b) in chunk.iter().enumerate() {
                nb_idx.extend_from_slice(&b.neighbor_images);
                owner.extend(std::iter::repeat_n(pos, b.neighbor_images.len()));
                weights.extend_from_slice(&b.weights);
            }
            let input = StepInput {
                seeds: batch_input(train, &seeds, &shape)?,
                labels: chunk.iter().map(|b| b.label).collect(),
                neighbors: if nb_idx.is_empty() {
                    None
                } else {
                    Some(batch_input(train, &nb_idx, &shape)?)
                },
                owner,
                weights,
            };
            run_step(&mut net, &mut opt, &input, cfg, &mut acc, ("train_graph", epoch, step))?;
        }
        history.push(acc.finish(epoch));
    }
    Ok(TrainedModel {
        net,
        history,
        config: cfg.clone(),
        orders,
    })
}

/// Plain mini-batch training on cross-entropy, visiting a fresh permutation
/// of `train` each epoch.
pub fn train_base_model(train: &LabeledDataset, net: Network, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, Stream::Sampler);
    let orders: Vec<Vec<usize>> = (0..cfg.epochs)
        .map(|_| {
            let mut o = train.all_indices();
            o.shuffle(&mut rng);
            o
        })
        .collect();
    train_base_model_with_orders(train, net, cfg, &orders)
}

/// Base training with the visiting order of every epoch given; runs
/// `orders.len()` epochs.
pub fn train_base_model_with_orders(
    train: &LabeledDataset,
    mut net: Network,
    cfg: &TrainConfig,
    orders: &[Vec<usize>],
) -> Result<TrainedModel> {
    cfg.validate()?;
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.lr)?;
    let shape = net.input_shape().to_vec();
    let mut history = Vec::with_capacity(orders.len());
    for (epoch, order) in orders.iter().enumerate() {
        let mut acc = EpochAcc::new();
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let input = StepInput {
                seeds: batch_input(train, chunk, &shape)?,
                labels: chunk.iter().map(|&i| train.get(i).label).collect(),
                neighbors: None,
                owner: vec![],
                weights: vec![],
            };
            run_step(&mut net, &mut opt, &input, cfg, &mut acc, ("train_base", epoch, step))?;
        }
        history.push(acc.finish(epoch));
    }
    let mut config = cfg.clone();
    config.epochs = orders.len();
    Ok(TrainedModel {
        net,
        history,
        config,
        orders: orders.to_vec(),
    })
}

/// Class probabilities (softmax of the network output) and argmax
/// predictions for every image of `ds`.
pub fn predict(net: &Network, ds: &LabeledDataset) -> Result<(Tensor, Vec<usize>)> {
    let x = batch_input(ds, &ds.all_indices(), net.input_shape())?;
    let mut out = net.predict(&x, 128)?;
    if !matches!(net.layers().last(), Some(crate::diffcore::LayerSpec::Softmax)) {
        let c = out.row_len();
        for row in out.data_mut().chunks_mut(c) {
            crate::diffcore::tape::softmax_in_place(row);
        }
    }
    let preds = out.argmax_rows();
    Ok((out, preds))
}
