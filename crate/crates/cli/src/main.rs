use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use graphreg::pipeline::{
    clear_failure, flag_failure, run_pipeline, sweep_threshold, write_sweep_csv, PipelineConfig, Stage, StageError,
    Workdir,
};

/// Similarity-graph regularized classifier training.
#[derive(Parser, Debug)]
#[command(name = "graphreg", version)]
struct Cli {
    /// JSON pipeline config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for stage commands; for run-all it replaces the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config's `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// With run-all: execute the stages one at a time on disk and stop after
    /// this one.
    #[arg(long, global = true)]
    stage: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate or load the dataset into `<out>/data`.
    GenData,
    /// Oversample minority classes into `<out>/balanced`.
    Balance,
    /// Split and embed the training images.
    Embed,
    /// Cluster the embeddings of each class.
    Cluster,
    /// Build and merge the class similarity graphs.
    Graph,
    /// Train the base and graph-regularized models.
    Train,
    /// Evaluate both models on the test split.
    Eval,
    /// Every stage for every configured seed, plus report.json.
    RunAll,
    /// Graph statistics across similarity thresholds.
    Sweep {
        /// Comma-separated thresholds; defaults to the config's list.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        thresholds: Option<Vec<f64>>,
    },
}

fn config_error(e: impl Into<graphreg::Error>) -> StageError {
    StageError {
        stage: Stage::Config,
        source: e.into(),
    }
}

fn run(cli: Cli) -> Result<(), StageError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).map_err(config_error)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    cfg.validate().map_err(config_error)?;
    let seed = cfg.seeds[0];
    let stage = match &cli.stage {
        None => None,
        Some(name) => match Stage::parse(name) {
            Some(s) => Some(s),
            None => {
                return Err(config_error(graphreg::Error::InvalidArgument(format!(
                    "unknown stage {name:?}"
                ))))
            }
        },
    };
    if stage.is_some() && !matches!(cli.command, Command::RunAll) {
        return Err(config_error(graphreg::Error::InvalidArgument(
            "--stage only applies to run-all".into(),
        )));
    }
    if let Command::RunAll = cli.command {
        if stage.is_none() {
            let bundle = run_pipeline(&cfg)?;
            let s = &bundle.summary;
            println!("seeds: {:?}", cfg.seeds);
            println!("base   accuracy {:.4}  macro-F1 {:.4}", s.base_accuracy, s.base_macro_f1);
            println!("graph  accuracy {:.4}  macro-F1 {:.4}", s.graph_accuracy, s.graph_macro_f1);
            println!("report: {}", cfg.out.join("report.json").display());
            return Ok(());
        }
    }
    let wd = Workdir::new(&cfg.out).map_err(config_error)?;
    clear_failure(&cfg.out);
    let result = match cli.command {
        Command::GenData => wd.gen_data(&cfg, seed),
        Command::Balance => wd.balance(&cfg, seed),
        Command::Embed => wd.embed(&cfg, seed),
        Command::Cluster => wd.cluster(&cfg, seed),
        Command::Graph => wd.graph(&cfg),
        Command::Train => wd.train(&cfg, seed),
        Command::Eval => wd.eval(),
        Command::RunAll => wd.run_through(&cfg, seed, stage.expect("handled above")),
        Command::Sweep { thresholds } => {
            let t = thresholds.unwrap_or_else(|| cfg.sweep_thresholds.clone());
            sweep_threshold(&cfg, &t).and_then(|rows| {
                for r in &rows {
                    println!(
                        "threshold {:.3}  snc {}  snnc {}  filtered {}  edges {}",
                        r.threshold, r.snc, r.snnc, r.filtered, r.edges
                    );
                }
                write_sweep_csv(&rows, &wd.path("sweep.csv")).map_err(|e| StageError {
                    stage: Stage::Report,
                    source: e,
                })
            })
        }
    };
    result.inspect_err(|e| flag_failure(&cfg.out, e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.stage.name(), e.source);
            ExitCode::from(e.stage.exit_code() as u8)
        }
    }
}
