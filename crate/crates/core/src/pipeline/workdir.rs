//! Stage-at-a-time execution over an output directory. Each stage reads the
//! artifacts of the earlier ones and writes its own:
//!
//! | stage    | writes |
//! |----------|--------|
//! | gen-data | `data/` (PGM images, manifest, stats) |
//! | balance  | `balanced/` |
//! | embed    | `split.json`, `embeddings.csv`, `embeddings.grct` |
//! | cluster  | `clusters.json`, `clusters.csv` |
//! | graph    | `graph.grct`, `graph_edges.csv`, `graph_stats.json` |
//! | train    | `{base,graph}_model.grct`, `{base,graph}_history.csv` |
//! | eval     | `{base,graph}_panel.{csv,json}`, `{base,graph}_confusion.csv` |
//!
//! Later stages read `balanced/` when it exists and `data/` otherwise.
//! Images pass through 8-bit PGM files here, so results can differ slightly
//! from an in-memory run of the same seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::stages::*;
use super::{write_json, AtStage, PipelineConfig, Stage, StageError};
use crate::dataset::{load_cache, save_cache, LabeledDataset};
use crate::diffcore::Network;
use crate::embed::EmbeddingTable;
use crate::error::{invalid, Error, Result};
use crate::graph::{graph_stats, load_graph, save_graph, write_edge_csv};
use crate::train::write_history;

type StageResult<T> = std::result::Result<T, StageError>;

pub struct Workdir {
    pub root: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Workdir { root })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn require(&self, name: &str, producer: Stage) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(invalid(format!(
                "{} is missing; run the {} stage first",
                p.display(),
                producer.name()
            )))
        }
    }

    /// Balanced data when present, else the raw data.
    pub fn dataset(&self) -> Result<LabeledDataset> {
        let b = self.path("balanced");
        if b.join("manifest.csv").exists() {
            load_cache(b)
        } else {
            load_cache(self.require("data", Stage::GenData)?)
        }
    }

    /// The training and test subsets recorded by the embed stage.
    pub fn split_sets(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        let ds = self.dataset()?;
        let split: SplitIndices = read_json(&self.require("split.json", Stage::Embed)?)?;
        if split.train.iter().chain(&split.test).any(|&i| i >= ds.len()) {
            return Err(invalid("split.json does not match the dataset"));
        }
        Ok((ds.subset(&split.train), ds.subset(&split.test)))
    }

    pub fn gen_data(&self, cfg: &PipelineConfig, seed: u64) -> StageResult<()> {
        let ds = data_stage(cfg, seed).at(Stage::GenData)?;
        save_cache(&ds, self.path("data")).at(Stage::GenData)
    }

    pub fn balance(&self, cfg: &PipelineConfig, seed: u64) -> StageResult<()> {
        let ds = load_cache(self.require("data", Stage::GenData).at(Stage::Balance)?).at(Stage::Balance)?;
        let b = balance_stage(&ds, cfg, seed).at(Stage::Balance)?;
        save_cache(&b, self.path("balanced")).at(Stage::Balance)
    }

    /// Split, then embed the training part.
    pub fn embed(&self, cfg: &PipelineConfig, seed: u64) -> StageResult<()> {
        let ds = self.dataset().at(Stage::Embed)?;
        let split = split_stage(&ds, cfg, seed).at(Stage::Split)?;
        write_json(&self.path("split.json"), &split).at(Stage::Split)?;
        let emb = embed_stage(&ds.subset(&split.train), cfg, seed).at(Stage::Embed)?;
        emb.write_csv(self.path("embeddings.csv")).at(Stage::Embed)?;
        emb.save(self.path("embeddings.grct")).at(Stage::Embed)
    }

    fn embeddings(&self) -> Result<EmbeddingTable> {
        EmbeddingTable::load(self.require("embeddings.grct", Stage::Embed)?)
    }

    pub fn cluster(&self, cfg: &PipelineConfig, seed: u64) -> StageResult<()> {
        let run = || -> Result<()> {
            let (train, _) = self.split_sets()?;
            let emb = self.embeddings()?;
            let clusters = cluster_stage(&train, &emb, cfg, seed)?;
            write_json(&self.path("clusters.json"), &clusters)?;
            let mut w = csv::Writer::from_path(self.path("clusters.csv"))?;
            w.write_record(["index", "class", "cluster"])?;
            for (c, cc) in &clusters {
                for (&r, &l) in cc.rows.iter().zip(&cc.assignment.labels) {
                    w.write_record([emb.indices()[r].to_string(), c.to_string(), l.to_string()])?;
                }
            }
            w.flush()?;
            Ok(())
        };
        run().at(Stage::Cluster)
    }

    pub fn graph(&self, cfg: &PipelineConfig) -> StageResult<()> {
        let run = || -> Result<()> {
            let (train, _) = self.split_sets()?;
            let emb = self.embeddings()?;
            let clusters: BTreeMap<usize, ClassClusters> =
                read_json(&self.require("clusters.json", Stage::Cluster)?)?;
            let g = build_graph(&train, &emb, &clusters, cfg.graph.threshold, cfg.cluster.algorithm)?;
            save_graph(&g, self.path("graph.grct"))?;
            write_edge_csv(&g, self.path("graph_edges.csv"))?;
            write_json(&self.path("graph_stats.json"), &graph_stats(&g, cfg.train.max_neighbors))
        };
        run().at(Stage::Graph)
    }

    pub fn train(&self, cfg: &PipelineConfig, seed: u64) -> StageResult<()> {
        let run = || -> Result<()> {
            let (train, _) = self.split_sets()?;
            let g = load_graph(self.require("graph.grct", Stage::Graph)?)?;
            let pair = train_stage(&g, &train, cfg, seed)?;
            for (tag, m) in [("base", &pair.base), ("graph", &pair.graph)] {
                m.net.save(self.path(&format!("{tag}_model.grct")))?;
                write_history(&m.history, self.path(&format!("{tag}_history.csv")))?;
            }
            Ok(())
        };
        run().at(Stage::Train)
    }

    pub fn eval(&self) -> StageResult<()> {
        let run = || -> Result<()> {
            let (_, test) = self.split_sets()?;
            let names = test.class_names().to_vec();
            for tag in ["base", "graph"] {
                let net = Network::load(self.require(&format!("{tag}_model.grct"), Stage::Train)?)?;
                let panel = eval_model(&net, &test)?;
                panel.write_csv(&names, self.path(&format!("{tag}_panel.csv")))?;
                panel.write_json(self.path(&format!("{tag}_panel.json")))?;
                panel.confusion.write_csv(&names, self.path(&format!("{tag}_confusion.csv")))?;
            }
            Ok(())
        };
        run().at(Stage::Eval)
    }

    /// Run the on-disk stages in order, stopping after `last`. Balancing
    /// runs only when the config enables it; a stale `balanced/` is removed
    /// otherwise.
    pub fn run_through(&self, cfg: &PipelineConfig, seed: u64, last: Stage) -> StageResult<()> {
        let order = [
            Stage::GenData,
            Stage::Balance,
            Stage::Embed,
            Stage::Cluster,
            Stage::Graph,
            Stage::Train,
            Stage::Eval,
        ];
        if !order.contains(&last) {
            return Err(StageError {
                stage: Stage::Config,
                source: invalid(format!("cannot stop at stage {}", last.name())),
            });
        }
        for st in order {
            match st {
                Stage::GenData => self.gen_data(cfg, seed)?,
                Stage::Balance if cfg.balance.enabled => self.balance(cfg, seed)?,
                Stage::Balance => {
                    let b = self.path("balanced");
                    if b.exists() {
                        std::fs::remove_dir_all(b).map_err(Error::from).at(Stage::Balance)?;
                    }
                }
                Stage::Embed => self.embed(cfg, seed)?,
                Stage::Cluster => self.cluster(cfg, seed)?,
                Stage::Graph => self.graph(cfg)?,
                Stage::Train => self.train(cfg, seed)?,
                _ => self.eval()?,
            }
            if st == last {
                break;
            }
        }
        Ok(())
    }
}
