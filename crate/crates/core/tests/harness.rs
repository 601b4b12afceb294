use std::path::Path;

use pointfuse_core::harness::dataset::{dir_hash, TARGET_FILE};
use pointfuse_core::harness::oracle::{run_oracles, SUITES};
use pointfuse_core::harness::train::load_training_set;
use pointfuse_core::harness::{
    cmd_eval, cmd_gen, cmd_sample, cmd_train, sampling_config, RunConfig, Trainer,
    BEST_CHECKPOINT_FILE, CHECKPOINT_FILE, OUTPUT_FILE,
};
use pointfuse_core::io::read_bytes;
use pointfuse_core::Error;
use serde_json::json;

fn tiny() -> RunConfig {
    RunConfig {
        scenes: 2,
        n_gt: 256,
        image_size: 16,
        c1: 4,
        c2: 4,
        c_local: 4,
        z_dim: 4,
        d_k: 4,
        local_width1: 4,
        local_width2: 4,
        width1: 6,
        width2: 6,
        width3: 6,
        t_steps: 50,
        steps: 5,
        batch_size: 2,
        epochs: 2,
        steps_per_epoch: Some(2),
        emd_points: 64,
        ..RunConfig::default()
    }
}

fn overrides(v: serde_json::Value) -> serde_json::Map<String, serde_json::Value> {
    v.as_object().unwrap().clone()
}

#[test]
fn config_round_trips_and_rejects_unknown_keys() {
    let cfg = tiny();
    assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    assert!(matches!(
        RunConfig::from_json(r#"{"widht1": 3}"#),
        Err(Error::Config(_))
    ));
    let partial = RunConfig::from_json(r#"{"seed": 9}"#).unwrap();
    assert_eq!(
        partial,
        RunConfig {
            seed: 9,
            ..RunConfig::default()
        }
    );
    let merged = cfg
        .merged(&overrides(json!({"lr": 0.5, "task": "colorization"})))
        .unwrap();
    assert_eq!(merged.lr, 0.5);
    assert_eq!(merged.dim(), 6);
    assert_eq!(cfg.model_differences(&merged), vec!["task".to_string()]);
    assert_ne!(cfg.hash(), merged.hash());
}

#[test]
fn invalid_configs_exit_with_code_one() {
    for bad in [
        RunConfig { steps: 0, ..tiny() },
        RunConfig {
            steps: 51,
            ..tiny()
        },
        RunConfig {
            width2: 0,
            ..tiny()
        },
        RunConfig { lr: -1.0, ..tiny() },
        RunConfig {
            batch_size: 0,
            ..tiny()
        },
    ] {
        let err = bad.validate().unwrap_err();
        assert_eq!(err.exit_code(), 1, "{err}");
    }
}

#[test]
fn generation_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let ma = cmd_gen(&tiny(), a.path()).unwrap();
    let mb = cmd_gen(&tiny(), b.path()).unwrap();
    let mc = cmd_gen(&RunConfig { seed: 1, ..tiny() }, c.path()).unwrap();
    assert_eq!(ma.scenes.len(), 2);
    assert_eq!(ma.dataset_hash, mb.dataset_hash);
    assert_eq!(dir_hash(a.path()).unwrap(), dir_hash(b.path()).unwrap());
    assert_ne!(ma.dataset_hash, mc.dataset_hash);
}

#[test]
fn ground_truth_against_itself_is_perfect() {
    let data = tempfile::tempdir().unwrap();
    cmd_gen(&tiny(), data.path()).unwrap();
    // A cap above the cloud size keeps EMD on the full, identical clouds.
    let cfg = RunConfig {
        emd_points: 4096,
        ..tiny()
    };
    let report = cmd_eval(&cfg, data.path(), data.path(), TARGET_FILE, TARGET_FILE).unwrap();
    assert_eq!(report.pairs.len(), 2);
    for p in &report.pairs {
        assert_eq!(p.metrics.cd, 0.0);
        assert!(p.metrics.dcd.abs() < 1e-12);
        assert_eq!(p.metrics.f1, 1.0);
        assert!(p.metrics.emd.abs() < 1e-12);
    }
    assert_eq!(report.mean.f1, 1.0);
    assert_eq!(report.std.f1, 0.0);
}

#[test]
fn missing_prediction_is_an_error() {
    let data = tempfile::tempdir().unwrap();
    let empty = tempfile::tempdir().unwrap();
    cmd_gen(&tiny(), data.path()).unwrap();
    let err = cmd_eval(&tiny(), empty.path(), data.path(), OUTPUT_FILE, TARGET_FILE).unwrap_err();
    assert!(err.to_string().contains("missing prediction"), "{err}");
    assert_eq!(err.exit_code(), 2);
}

fn train_dir(cfg: &RunConfig, data: &Path, out: &Path) {
    cmd_gen(cfg, data).unwrap();
    cmd_train(cfg, data, out, false).unwrap();
}

#[test]
fn sampling_refuses_model_key_changes() {
    let data = tempfile::tempdir().unwrap();
    let run = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        epochs: 1,
        ..tiny()
    };
    train_dir(&cfg, data.path(), run.path());
    let ok = sampling_config(run.path(), &overrides(json!({"steps": 3, "seed": 4}))).unwrap();
    assert_eq!((ok.steps, ok.seed, ok.width1), (3, 4, 6));
    let err = sampling_config(run.path(), &overrides(json!({"width1": 8}))).unwrap_err();
    assert!(
        matches!(&err, Error::ConfigMismatch(keys) if keys == &["width1".to_string()]),
        "{err}"
    );
    assert_eq!(err.exit_code(), 1);

    let out = tempfile::tempdir().unwrap();
    let provs = cmd_sample(&ok, run.path(), data.path(), out.path()).unwrap();
    assert_eq!(provs.len(), 2);
    assert!(provs.iter().all(|p| p.n_out == 256 && p.steps == 3));
    let report = cmd_eval(&ok, out.path(), data.path(), OUTPUT_FILE, TARGET_FILE).unwrap();
    assert!(report.pairs.iter().all(|p| p.metrics.dcd.is_finite()));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let data = tempfile::tempdir().unwrap();
    let full = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    let cfg = tiny();
    train_dir(&cfg, data.path(), full.path());
    let first = RunConfig {
        epochs: 1,
        ..tiny()
    };
    cmd_train(&first, data.path(), split.path(), false).unwrap();
    let resumed = cmd_train(&cfg, data.path(), split.path(), true).unwrap();
    assert_eq!(resumed.steps, 4);
    assert_eq!(resumed.epoch_losses.len(), 2);
    for name in [CHECKPOINT_FILE, BEST_CHECKPOINT_FILE] {
        assert_eq!(
            read_bytes(&full.path().join(name)).unwrap(),
            read_bytes(&split.path().join(name)).unwrap(),
            "{name}"
        );
    }
    let changed = RunConfig {
        width3: 7,
        epochs: 3,
        ..tiny()
    };
    assert!(matches!(
        cmd_train(&changed, data.path(), split.path(), true),
        Err(Error::ConfigMismatch(_))
    ));
}

#[test]
fn checkpoint_round_trip_restores_every_tensor() {
    let data = tempfile::tempdir().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    cmd_gen(&cfg, data.path()).unwrap();
    let set = load_training_set(&cfg, data.path()).unwrap();
    let mut trainer = Trainer::new(&cfg).unwrap();
    trainer.step(&set).unwrap();
    trainer.step(&set).unwrap();
    let path = dir.path().join("x.pfck");
    trainer.save(&path).unwrap();
    let back = Trainer::restore(&cfg, &path).unwrap();
    assert_eq!(back.step_count(), 2);
    let a = trainer.checkpoint_tensors();
    let b = back.checkpoint_tensors();
    assert_eq!(a.len(), b.len());
    for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
        assert_eq!(na, nb);
        assert_eq!(ta.data(), tb.data(), "{na}");
    }
    let other = RunConfig {
        width1: 7,
        ..tiny()
    };
    assert!(Trainer::restore(&other, &path).is_err());
}

#[test]
fn oracles_pass_and_catch_an_injected_gradient_bug() {
    let all: Vec<String> = SUITES.iter().map(|s| s.to_string()).collect();
    let report = run_oracles(&all, 0, false).unwrap();
    assert!(report.passed, "{report:?}");
    assert_eq!(report.results.len(), SUITES.len());

    let bugged = run_oracles(&["fd".to_string(), "knn".to_string()], 0, true).unwrap();
    assert!(!bugged.passed);
    assert!(!bugged.results[0].passed);
    assert!(bugged.results[1].passed);
    assert!(run_oracles(&["nope".to_string()], 0, false).is_err());
}
