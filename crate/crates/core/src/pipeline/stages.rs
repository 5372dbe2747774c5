use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DataSource, NetworkConfig, PipelineConfig};
use crate::cluster::{cluster, Algorithm, ClusterAssignment};
use crate::dataset::{balance, generate_synthetic, load_manifest, split_indices, LabeledDataset, SyntheticConfig};
use crate::diffcore::Network;
use crate::embed::{aae_embed, aae_train, tsne_embed, vae_embed, vae_train, EmbeddingTable, Method, TsneConfig};
use crate::error::{invalid, Error, Result};
use crate::graph::{build_class_graph, merge_graphs, SimilarityGraph};
use crate::metrics::{evaluate, MetricPanel};
use crate::rng::{stream, Stream};
use crate::train::{predict, train_base_model, train_graph_model, TrainedModel};

/// Generate (seeded by `seed`) or load the raw dataset.
pub fn data_stage(cfg: &PipelineConfig, seed: u64) -> Result<LabeledDataset> {
    match &cfg.data {
        DataSource::Synthetic(s) => generate_synthetic(&SyntheticConfig { seed, ..s.clone() }),
        DataSource::Manifest { path, classes } => load_manifest(path, classes.as_deref()),
    }
}

pub fn balance_stage(ds: &LabeledDataset, cfg: &PipelineConfig, seed: u64) -> Result<LabeledDataset> {
    balance(ds, &cfg.balance.augment, seed)
}

/// Train/test positions into the (possibly balanced) dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_stage(ds: &LabeledDataset, cfg: &PipelineConfig, seed: u64) -> Result<SplitIndices> {
    let (train, test) = split_indices(ds, cfg.train_fraction, seed)?;
    Ok(SplitIndices { train, test })
}

/// Embed every training image; table indices are positions in `train`.
pub fn embed_stage(train: &LabeledDataset, cfg: &PipelineConfig, seed: u64) -> Result<EmbeddingTable> {
    let idx = train.all_indices();
    let x = train.flat_tensor(&idx)?;
    let e = &cfg.embedder;
    let ae = crate::embed::AutoencoderConfig {
        seed,
        ..e.autoencoder.clone()
    };
    match e.method {
        Method::Tsne => Ok(tsne_embed(&x, &idx, &TsneConfig { seed, ..e.tsne.clone() })?.table),
        Method::Vae => vae_embed(&vae_train(&x, &ae)?, &x, &idx),
        Method::Aae => aae_embed(&aae_train(&x, &ae)?, &x, &idx),
    }
}

/// Clustering of one class: `rows` are the class's rows in the embedding
/// table and `assignment.labels[i]` is the cluster of `rows[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassClusters {
    pub rows: Vec<usize>,
    pub assignment: ClusterAssignment,
}

/// Cluster each class separately with `k` capped at the class size.
pub fn cluster_stage(
    train: &LabeledDataset,
    emb: &EmbeddingTable,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<BTreeMap<usize, ClassClusters>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (row, &img) in emb.indices().iter().enumerate() {
        if img >= train.len() {
            return Err(invalid(format!("embedding row {row} refers to image {img} outside the training set")));
        }
        by_class.entry(train.get(img).label).or_default().push(row);
    }
    let mut out = BTreeMap::new();
    for c in 0..train.num_classes() {
        let rows = by_class.remove(&c).ok_or(Error::EmptyClass(c))?;
        let sub = emb.select(&rows)?;
        let k = cfg.cluster.k.min(rows.len());
        let assignment = cluster(&sub, cfg.cluster.algorithm, k, seed, cfg.cluster.max_iters)?;
        out.insert(c, ClassClusters { rows, assignment });
    }
    Ok(out)
}

/// Per-class graphs merged into one.
pub fn build_graph(
    train: &LabeledDataset,
    emb: &EmbeddingTable,
    clusters: &BTreeMap<usize, ClassClusters>,
    threshold: f64,
    algorithm: Algorithm,
) -> Result<SimilarityGraph> {
    let mut parts = Vec::with_capacity(clusters.len());
    for (&c, cc) in clusters {
        for &r in &cc.rows {
            let img = emb.indices()[r];
            if img >= train.len() || train.get(img).label != c {
                return Err(invalid(format!("row {r} is not a class-{c} training image")));
            }
        }
        parts.push(build_class_graph(&emb.select(&cc.rows)?, &cc.assignment, c, threshold)?);
    }
    let mut g = merge_graphs(&parts)?;
    g.cluster_algorithm = algorithm.name().to_string();
    Ok(g)
}

/// The classifier for `classes` outputs and `(h, w)` images, initialized
/// from the seed's init stream.
pub fn init_network(net: &NetworkConfig, classes: usize, (h, w): (usize, usize), seed: u64) -> Result<Network> {
    let layers = net.layers.clone().unwrap_or_else(|| NetworkConfig::default_layers(classes));
    if layers.len() < 2 {
        return Err(invalid("network needs at least two layers"));
    }
    let tap = net.tap.unwrap_or(layers.len() - 2);
    let shape = if net.flat_input { vec![h * w] } else { vec![1, h, w] };
    let mut rng = stream(seed, Stream::Init);
    let n = Network::new(shape, layers, tap, &mut rng)?;
    if n.output_shape() != [classes] {
        return Err(invalid(format!(
            "network output shape {:?} does not match {classes} classes",
            n.output_shape()
        )));
    }
    Ok(n)
}

pub struct TrainedPair {
    pub base: TrainedModel,
    pub graph: TrainedModel,
}

/// Base and graph-regularized models from the same initial weights and
/// budget.
pub fn train_stage(g: &SimilarityGraph, train: &LabeledDataset, cfg: &PipelineConfig, seed: u64) -> Result<TrainedPair> {
    let size = train.image_size().ok_or_else(|| invalid("empty training set"))?;
    let net = init_network(&cfg.network, train.num_classes(), size, seed)?;
    let tc = crate::train::TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let graph = train_graph_model(g, &g.node_image_map(), train, net.clone(), &tc)?;
    let base = train_base_model(train, net, &tc)?;
    Ok(TrainedPair { base, graph })
}

pub fn eval_model(net: &Network, test: &LabeledDataset) -> Result<MetricPanel> {
    let (probs, preds) = predict(net, test)?;
    evaluate(&probs, &preds, &test.labels(), test.num_classes())
}

/// Test-set panels of (base, graph).
pub fn eval_stage(pair: &TrainedPair, test: &LabeledDataset) -> Result<(MetricPanel, MetricPanel)> {
    Ok((eval_model(&pair.base.net, test)?, eval_model(&pair.graph.net, test)?))
}
