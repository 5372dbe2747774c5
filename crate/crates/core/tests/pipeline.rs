use graphreg::dataset::{AugmentParams, SyntheticConfig};
use graphreg::embed::Method;
use graphreg::pipeline::{run_pipeline, run_seed, sweep_threshold, DataSource, PipelineConfig, Stage, FAILURE_MARKER};

fn small(counts: Vec<usize>) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        data: DataSource::Synthetic(SyntheticConfig {
            classes: counts.len(),
            counts,
            side: 16,
            seed: 0,
        }),
        ..PipelineConfig::default()
    };
    cfg.embedder.method = Method::Tsne;
    cfg.embedder.tsne.perplexity = 5.0;
    cfg.embedder.tsne.iters = 200;
    cfg.cluster.k = 2;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 8;
    cfg
}

#[test]
fn empty_json_gives_defaults() {
    let cfg = PipelineConfig::from_json("{}").unwrap();
    assert_eq!(cfg, PipelineConfig::default());
    assert_eq!(cfg.graph.threshold, 0.75);
    let text = serde_json::to_string(&small(vec![5, 5])).unwrap();
    assert_eq!(PipelineConfig::from_json(&text).unwrap(), small(vec![5, 5]));
}

#[test]
fn validation_rejects_bad_configs() {
    let ok = small(vec![5, 5]);
    ok.validate().unwrap();
    let mut c = ok.clone();
    c.seeds.clear();
    assert!(c.validate().is_err());
    let mut c = ok.clone();
    c.train_fraction = 1.0;
    assert!(c.validate().is_err());
    let mut c = ok.clone();
    c.cluster.k = 0;
    assert!(c.validate().is_err());
    let mut c = ok.clone();
    c.data = DataSource::Manifest {
        path: "/nonexistent/manifest.csv".into(),
        classes: None,
    };
    assert!(c.validate().is_err());
    let mut c = ok;
    c.balance.augment.crop_fraction = 0.0;
    assert!(c.validate().is_err());
}

#[test]
fn stage_codes_are_distinct_and_names_parse() {
    let codes: std::collections::BTreeSet<i32> = Stage::ALL.iter().map(|s| s.exit_code()).collect();
    assert_eq!(codes.len(), Stage::ALL.len());
    assert!(codes.iter().all(|&c| c > 1 && c < 256));
    for s in Stage::ALL {
        assert_eq!(Stage::parse(s.name()), Some(s));
    }
}

#[test]
fn sweep_floor_keeps_everything_and_snc_falls() {
    let cfg = small(vec![20, 14, 9]);
    let rows = sweep_threshold(&cfg, &[-1.0]).unwrap();
    assert_eq!(rows[0].filtered, 0);
    let rows = sweep_threshold(&cfg, &[0.5, 0.75, 0.95]).unwrap();
    assert!(rows.windows(2).all(|w| w[1].snc <= w[0].snc && w[1].edges <= w[0].edges));
    let err = sweep_threshold(&cfg, &[1.5]).unwrap_err();
    assert_eq!(err.stage, Stage::Config);
}

#[test]
fn duplicate_heavy_balanced_set_keeps_seeds_at_high_threshold() {
    let mut cfg = small(vec![30, 3]);
    cfg.balance.enabled = true;
    cfg.balance.augment = AugmentParams {
        noise_sigma: 0.0,
        saturation_delta: 0.0,
        rotation_max_deg: 0.0,
        crop_fraction: 1.0,
    };
    // deterministic encoder: copies of one image share an embedding
    cfg.embedder.method = Method::Vae;
    cfg.embedder.autoencoder.latent = 4;
    cfg.embedder.autoencoder.hidden = 16;
    cfg.embedder.autoencoder.epochs = 2;
    let rows = sweep_threshold(&cfg, &[0.95]).unwrap();
    assert!(rows[0].snc > 0);
}

#[test]
fn seed_runs_repeat_exactly() {
    let cfg = small(vec![16, 10, 6]);
    let a = run_seed(&cfg, 4).unwrap();
    let b = run_seed(&cfg, 4).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.pair.graph.net, b.pair.graph.net);
    let c = run_seed(&cfg, 5).unwrap();
    assert_ne!(a.embeddings, c.embeddings);
}

#[test]
fn failed_run_leaves_marker_naming_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(vec![16, 10]);
    cfg.out = dir.path().to_path_buf();
    if let DataSource::Synthetic(s) = &mut cfg.data {
        s.side = 2;
    }
    let err = run_pipeline(&cfg).unwrap_err();
    assert_eq!(err.stage, Stage::GenData);
    let marker: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join(FAILURE_MARKER)).unwrap()).unwrap();
    assert_eq!(marker["stage"], "gen-data");

    cfg.data = DataSource::Synthetic(SyntheticConfig {
        classes: 2,
        counts: vec![16, 10],
        side: 16,
        seed: 0,
    });
    cfg.sweep_thresholds.clear();
    let bundle = run_pipeline(&cfg).unwrap();
    assert!(!dir.path().join(FAILURE_MARKER).exists());
    assert_eq!(bundle.runs.len(), 1);
    assert!(dir.path().join("seed-0").join("graph_edges.csv").exists());
}
