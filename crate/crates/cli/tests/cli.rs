use std::path::Path;
use std::process::{Command, Output};

use bladescan::{Workspace, BLADES_JSON, PATCHES_CSV, SEGNET_LOG};
use bladescan_core::config::PipelineConfig;
use bladescan_core::ingest::DatasetIndex;

fn bladescan(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bladescan"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

#[test]
fn bad_configuration_exits_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"slic": {"n_clustres": 5}}"#).unwrap();
    let out = bladescan(tmp.path(), &["--config", cfg.to_str().unwrap(), "config"]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(&cfg, r#"{"detector": {"patch_size": 20}}"#).unwrap();
    assert_eq!(bladescan(tmp.path(), &["--config", cfg.to_str().unwrap(), "synth"]).status.code(), Some(2));
    let missing = tmp.path().join("absent.json");
    assert_eq!(bladescan(tmp.path(), &["--config", missing.to_str().unwrap(), "config"]).status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    for stage in ["pseudo-gt", "train-seg", "extract", "slic", "train-ad", "score", "evaluate"] {
        let out = bladescan(tmp.path(), &[stage]);
        assert_eq!(out.status.code(), Some(3), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn training_without_pseudo_ground_truth_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"synth": {"n_images": 4, "n_negatives": 1}}"#).unwrap();
    let c = cfg.to_str().unwrap();
    assert!(bladescan(tmp.path(), &["--config", c, "synth"]).status.success());
    assert_eq!(bladescan(tmp.path(), &["--config", c, "train-seg"]).status.code(), Some(3));
}

#[test]
fn config_prints_effective_values() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"train": {"epochs": 7}}"#).unwrap();
    let out = bladescan(tmp.path(), &["--config", cfg.to_str().unwrap(), "--seed", "5", "config"]);
    assert!(out.status.success());
    let printed = PipelineConfig::from_json(&out.stdout).unwrap();
    assert_eq!(printed.train.epochs, 7);
    assert_eq!(printed, PipelineConfig::from_json(br#"{"train": {"epochs": 7}}"#).unwrap().with_seed(5));
}

/// Every stage on a tiny dataset through the library entry points.
#[test]
fn stages_chain_on_a_tiny_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::from_json(
        br#"{
            "synth": {"n_images": 10, "n_negatives": 2, "defect_rate": 1.0},
            "data": {"test_fraction": 0.3},
            "train": {"epochs": 2},
            "detector": {"epochs": 2, "latent_dim": 8},
            "eval": {"n_resamples": 50, "warmup": 0}
        }"#,
    )
    .unwrap();
    let ws = Workspace::new(cfg, tmp.path());
    let idx = bladescan::synth(&ws).unwrap();
    assert_eq!((idx.positives.len(), idx.negatives.len()), (10, 2));
    assert_eq!(DatasetIndex::load(&ws.dataset()).unwrap(), idx);
    assert_eq!(bladescan::pseudo_gt(&ws).unwrap(), 0, "no degenerate pseudo ground truth");
    for rel in &idx.positives {
        assert!(ws.dataset().join(rel.replace(".png", ".pgt.png")).is_file(), "{rel}");
    }
    let seg = bladescan::train_seg(&ws).unwrap();
    assert_eq!(seg.training_log.len(), 2);
    assert!(ws.path(SEGNET_LOG).exists());
    let blades = bladescan::extract(&ws).unwrap();
    assert!(ws.path(BLADES_JSON).exists());
    if blades.is_empty() {
        // two epochs may not find a blade
        assert!(bladescan::slic(&ws).unwrap().is_empty());
        return;
    }
    let rows = bladescan::slic(&ws).unwrap();
    assert!(ws.path(PATCHES_CSV).exists());
    assert!(rows.iter().all(|r| r.defect_label.is_some()));
}
