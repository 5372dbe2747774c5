//! End-to-end runs: data, balancing, split, embedding, clustering, graph,
//! base and graph-regularized training, evaluation and reports.

mod stages;
mod workdir;

pub use stages::{
    balance_stage, build_graph, cluster_stage, data_stage, embed_stage, eval_model, eval_stage, init_network, split_stage,
    train_stage, ClassClusters, SplitIndices, TrainedPair,
};
pub use workdir::Workdir;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cluster::Algorithm;
use crate::dataset::{AugmentParams, SyntheticConfig};
use crate::diffcore::{LayerSpec, Padding};
use crate::embed::{AutoencoderConfig, Method, TsneConfig};
use crate::error::{invalid, Error, Result};
use crate::graph::{graph_stats, GraphStats, DEFAULT_THRESHOLD};
use crate::metrics::MetricPanel;
use crate::train::{write_history, EpochRecord, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Generated images; the run seed replaces `seed`.
    Synthetic(SyntheticConfig),
    Manifest {
        path: PathBuf,
        #[serde(default)]
        classes: Option<Vec<String>>,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BalanceConfig {
    pub enabled: bool,
    pub augment: AugmentParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub method: Method,
    pub tsne: TsneConfig,
    pub autoencoder: AutoencoderConfig,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            method: Method::Aae,
            tsne: TsneConfig::default(),
            autoencoder: AutoencoderConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub algorithm: Algorithm,
    pub k: usize,
    pub max_iters: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            algorithm: Algorithm::Kmeans,
            k: 3,
            max_iters: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    pub threshold: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// Classifier architecture. With `layers` unset a small CNN is used; `tap`
/// defaults to the penultimate layer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub layers: Option<Vec<LayerSpec>>,
    pub tap: Option<usize>,
    /// Feed flattened images instead of `(1, h, w)` planes.
    pub flat_input: bool,
}

impl NetworkConfig {
    /// Two conv/pool blocks, a 32-unit hidden layer and a linear output.
    pub fn default_layers(classes: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::Conv2d {
                filters: 8,
                kernel: 3,
                padding: Padding::Same,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::Conv2d {
                filters: 16,
                kernel: 3,
                padding: Padding::Same,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 32 },
            LayerSpec::Relu,
            LayerSpec::Dense { units: classes },
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub data: DataSource,
    pub balance: BalanceConfig,
    pub train_fraction: f64,
    pub embedder: EmbedderConfig,
    pub cluster: ClusterConfig,
    pub graph: GraphConfig,
    pub train: TrainConfig,
    pub network: NetworkConfig,
    pub seeds: Vec<u64>,
    pub sweep_thresholds: Vec<f64>,
    pub out: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data: DataSource::Synthetic(SyntheticConfig::default()),
            balance: BalanceConfig::default(),
            train_fraction: 0.7,
            embedder: EmbedderConfig::default(),
            cluster: ClusterConfig::default(),
            graph: GraphConfig::default(),
            train: TrainConfig::default(),
            network: NetworkConfig::default(),
            seeds: vec![0],
            sweep_thresholds: vec![0.5, 0.6, 0.7, 0.75, 0.8, 0.9, 0.95],
            out: PathBuf::from("out"),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_json(&std::fs::read_to_string(path)?)?;
        // manifest paths are relative to the config file
        if let DataSource::Manifest { path: m, .. } = &mut cfg.data {
            if m.is_relative() {
                if let Some(dir) = path.parent() {
                    *m = dir.join(&*m);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(invalid("config lists no seeds"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(invalid(format!("train_fraction {} outside (0, 1)", self.train_fraction)));
        }
        if let DataSource::Manifest { path, .. } = &self.data {
            if !path.exists() {
                return Err(invalid(format!("manifest {} does not exist", path.display())));
            }
        }
        if self.cluster.k == 0 {
            return Err(invalid("cluster k must be at least 1"));
        }
        self.train.validate()?;
        self.balance.augment.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    GenData,
    Balance,
    Split,
    Embed,
    Cluster,
    Graph,
    Train,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Config,
        Stage::GenData,
        Stage::Balance,
        Stage::Split,
        Stage::Embed,
        Stage::Cluster,
        Stage::Graph,
        Stage::Train,
        Stage::Eval,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::GenData => "gen-data",
            Stage::Balance => "balance",
            Stage::Split => "split",
            Stage::Embed => "embed",
            Stage::Cluster => "cluster",
            Stage::Graph => "graph",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }

    /// Process exit code for a failure in this stage.
    pub fn exit_code(self) -> i32 {
        10 + Stage::ALL.iter().position(|s| *s == self).expect("listed") as i32
    }
}

/// An error tagged with the stage that raised it.
#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub source: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {}: {}", self.stage.name(), self.source)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

pub(crate) trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub snc: usize,
    pub snnc: usize,
    pub max_degree: usize,
    pub filtered: usize,
    pub edges: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub counts_before_balance: Vec<usize>,
    pub counts: Vec<usize>,
    pub augmented: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub graph: GraphStats,
    pub base: MetricPanel,
    pub graph_model: MetricPanel,
    pub base_history: Vec<EpochRecord>,
    pub graph_history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub base_accuracy: f64,
    pub graph_accuracy: f64,
    pub base_macro_f1: f64,
    pub graph_macro_f1: f64,
    pub base_macro_auc: Option<f64>,
    pub graph_macro_auc: Option<f64>,
    /// Recall of the last class (the rarest in the default synthetic data).
    pub base_last_recall: f64,
    pub graph_last_recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub version: String,
    pub config: PipelineConfig,
    pub class_names: Vec<String>,
    pub runs: Vec<SeedReport>,
    pub summary: Summary,
    pub sweep: Vec<SweepRow>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn mean_opt(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = v.collect::<Option<Vec<_>>>()?;
    Some(mean(xs.into_iter()))
}

pub fn summarize(runs: &[SeedReport]) -> Summary {
    let last = |p: &MetricPanel| p.labels.last().map_or(0.0, |l| l.recall);
    Summary {
        base_accuracy: mean(runs.iter().map(|r| r.base.accuracy)),
        graph_accuracy: mean(runs.iter().map(|r| r.graph_model.accuracy)),
        base_macro_f1: mean(runs.iter().map(|r| r.base.macro_f1)),
        graph_macro_f1: mean(runs.iter().map(|r| r.graph_model.macro_f1)),
        base_macro_auc: mean_opt(runs.iter().map(|r| r.base.macro_auc)),
        graph_macro_auc: mean_opt(runs.iter().map(|r| r.graph_model.macro_auc)),
        base_last_recall: mean(runs.iter().map(|r| last(&r.base))),
        graph_last_recall: mean(runs.iter().map(|r| last(&r.graph_model))),
    }
}

/// Everything one seed produces, kept in memory.
pub struct SeedRun {
    pub report: SeedReport,
    pub class_names: Vec<String>,
    pub pair: TrainedPair,
    pub graph: crate::graph::SimilarityGraph,
    pub embeddings: crate::embed::EmbeddingTable,
}

/// Run every stage for one seed without touching the filesystem.
pub fn run_seed(cfg: &PipelineConfig, seed: u64) -> std::result::Result<SeedRun, StageError> {
    let raw = data_stage(cfg, seed).at(Stage::GenData)?;
    let counts_before_balance = raw.counts();
    let ds = if cfg.balance.enabled {
        balance_stage(&raw, cfg, seed).at(Stage::Balance)?
    } else {
        raw
    };
    let split = split_stage(&ds, cfg, seed).at(Stage::Split)?;
    let train = ds.subset(&split.train);
    let test = ds.subset(&split.test);
    let embeddings = embed_stage(&train, cfg, seed).at(Stage::Embed)?;
    let clusters = cluster_stage(&train, &embeddings, cfg, seed).at(Stage::Cluster)?;
    let graph = build_graph(&train, &embeddings, &clusters, cfg.graph.threshold, cfg.cluster.algorithm).at(Stage::Graph)?;
    let pair = train_stage(&graph, &train, cfg, seed).at(Stage::Train)?;
    let (base, graph_model) = eval_stage(&pair, &test).at(Stage::Eval)?;
    let report = SeedReport {
        seed,
        counts_before_balance,
        counts: ds.counts(),
        augmented: ds.augmented_count(),
        train_size: train.len(),
        test_size: test.len(),
        graph: graph_stats(&graph, cfg.train.max_neighbors),
        base,
        graph_model,
        base_history: pair.base.history.clone(),
        graph_history: pair.graph.history.clone(),
    };
    Ok(SeedRun {
        report,
        class_names: ds.class_names().to_vec(),
        pair,
        graph,
        embeddings,
    })
}

/// Name of the marker left in an output directory whose run failed; it
/// holds the failing stage and message.
pub const FAILURE_MARKER: &str = "FAILED.json";

/// Mark `out` as holding partial artifacts.
pub fn flag_failure(out: &Path, err: &StageError) {
    let body = serde_json::json!({ "stage": err.stage.name(), "error": err.source.to_string() });
    // best effort: the original error is what gets reported
    let _ = std::fs::create_dir_all(out);
    let _ = std::fs::write(out.join(FAILURE_MARKER), body.to_string());
}

pub fn clear_failure(out: &Path) {
    let _ = std::fs::remove_file(out.join(FAILURE_MARKER));
}

/// Run all seeds, write per-seed artifacts under `out/seed-<s>/` and the
/// bundle to `out/report.json`. On failure `out/FAILED.json` names the
/// stage.
pub fn run_pipeline(cfg: &PipelineConfig) -> std::result::Result<ReportBundle, StageError> {
    cfg.validate().at(Stage::Config)?;
    let out = &cfg.out;
    std::fs::create_dir_all(out).map_err(Error::from).at(Stage::Report)?;
    clear_failure(out);
    run_all_seeds(cfg).inspect_err(|e| flag_failure(out, e))
}

fn run_all_seeds(cfg: &PipelineConfig) -> std::result::Result<ReportBundle, StageError> {
    let out = &cfg.out;
    let mut runs = Vec::new();
    let mut class_names = Vec::new();
    for &seed in &cfg.seeds {
        let run = run_seed(cfg, seed)?;
        write_seed_artifacts(&run, &out.join(format!("seed-{seed}"))).at(Stage::Report)?;
        class_names = run.class_names;
        runs.push(run.report);
    }
    let sweep = if cfg.sweep_thresholds.is_empty() {
        Vec::new()
    } else {
        sweep_threshold(cfg, &cfg.sweep_thresholds)?
    };
    let bundle = ReportBundle {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        class_names,
        summary: summarize(&runs),
        runs,
        sweep,
    };
    write_bundle(&bundle, out).at(Stage::Report)?;
    Ok(bundle)
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn write_seed_artifacts(run: &SeedRun, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let r = &run.report;
    let names = &run.class_names;
    run.embeddings.write_csv(dir.join("embeddings.csv"))?;
    crate::graph::save_graph(&run.graph, dir.join("graph.grct"))?;
    crate::graph::write_edge_csv(&run.graph, dir.join("graph_edges.csv"))?;
    write_json(&dir.join("graph_stats.json"), &r.graph)?;
    for (tag, model, panel) in [("base", &run.pair.base, &r.base), ("graph", &run.pair.graph, &r.graph_model)] {
        model.net.save(dir.join(format!("{tag}_model.grct")))?;
        write_history(&model.history, dir.join(format!("{tag}_history.csv")))?;
        panel.write_csv(names, dir.join(format!("{tag}_panel.csv")))?;
        panel.write_json(dir.join(format!("{tag}_panel.json")))?;
        panel.confusion.write_csv(names, dir.join(format!("{tag}_confusion.csv")))?;
    }
    Ok(())
}

/// `report.json`, `summary.csv` (one row per seed and model) and
/// `sweep.csv`.
pub fn write_bundle(b: &ReportBundle, out: &Path) -> Result<()> {
    write_json(&out.join("report.json"), b)?;
    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    w.write_record(["seed", "model", "accuracy", "macro_auc", "macro_f1", "last_class_recall"])?;
    for r in &b.runs {
        for (name, p) in [("base", &r.base), ("graph", &r.graph_model)] {
            w.write_record([
                r.seed.to_string(),
                name.to_string(),
                format!("{:.6}", p.accuracy),
                p.macro_auc.map_or(String::new(), |a| format!("{a:.6}")),
                format!("{:.6}", p.macro_f1),
                format!("{:.6}", p.labels.last().map_or(0.0, |l| l.recall)),
            ])?;
        }
    }
    w.flush()?;
    write_sweep_csv(&b.sweep, &out.join("sweep.csv"))
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(["threshold", "snc", "snnc", "max_degree", "filtered", "edges"])?;
    }
    w.flush()?;
    Ok(())
}

/// Rebuild the graph at each threshold over one fixed set of embeddings
/// (first configured seed).
pub fn sweep_threshold(cfg: &PipelineConfig, thresholds: &[f64]) -> std::result::Result<Vec<SweepRow>, StageError> {
    if let Some(t) = thresholds.iter().find(|t| !(-1.0..=1.0).contains(*t)) {
        return Err(invalid(format!("threshold {t} outside [-1, 1]"))).at(Stage::Config);
    }
    let seed = *cfg.seeds.first().ok_or_else(|| invalid("no seeds")).at(Stage::Config)?;
    let raw = data_stage(cfg, seed).at(Stage::GenData)?;
    let ds = if cfg.balance.enabled {
        balance_stage(&raw, cfg, seed).at(Stage::Balance)?
    } else {
        raw
    };
    let split = split_stage(&ds, cfg, seed).at(Stage::Split)?;
    let train = ds.subset(&split.train);
    let emb = embed_stage(&train, cfg, seed).at(Stage::Embed)?;
    let clusters = cluster_stage(&train, &emb, cfg, seed).at(Stage::Cluster)?;
    sweep_over(&train, &emb, &clusters, cfg, thresholds)
}

/// Threshold sweep over precomputed embeddings and clusters.
pub fn sweep_over(
    train: &crate::dataset::LabeledDataset,
    emb: &crate::embed::EmbeddingTable,
    clusters: &BTreeMap<usize, ClassClusters>,
    cfg: &PipelineConfig,
    thresholds: &[f64],
) -> std::result::Result<Vec<SweepRow>, StageError> {
    thresholds
        .iter()
        .map(|&t| {
            let g = build_graph(train, emb, clusters, t, cfg.cluster.algorithm).at(Stage::Graph)?;
            let s = graph_stats(&g, cfg.train.max_neighbors);
            Ok(SweepRow {
                threshold: t,
                snc: s.snc,
                snnc: s.snnc,
                max_degree: s.max_degree,
                filtered: s.filtered,
                edges: s.edges,
            })
        })
        .collect()
}
