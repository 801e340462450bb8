//! End-to-end pipeline behavior at miniature scale: stage wiring, resume
//! semantics and determinism plumbing.

use std::path::{Path, PathBuf};

use poisonforge::error::Error;
use poisonforge::manifest::{DatasetManifest, Split};
use poisonforge::pipeline::{resume, run_pipeline};
use poisonforge::util::sha256_file;

fn write_config(dir: &Path, name: &str, json: serde_json::Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_vec_pretty(&json).unwrap()).unwrap();
    path
}

fn mini_edit_config() -> serde_json::Value {
    serde_json::json!({
        "access_level": "dataset",
        "profile": "desk",
        "seed": 21,
        "data": {"fixtures": {
            "num_classes": 3,
            "per_class_train": 40,
            "per_class_val": 10,
            "per_class_real": 6,
            "image_size": 32
        }},
        "trigger": "auto",
        "poison": {"target_class": 0, "poisoning_rate": 0.1, "label_mode": "dirty"},
        "train": {"epochs": 3},
        "defenses": ["strip"],
        "defense_params": {"strip": {"n": 4, "calibration_size": 8, "test_size": 8}}
    })
}

#[test]
fn label_only_without_manifest_skips_suggestion_and_completes() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "config.json",
        serde_json::json!({
            "access_level": "label_only",
            "profile": "desk",
            "seed": 3,
            "data": "none",
            "trigger": "book",
            "generated_data": {"clean_per_class": 12, "val_per_class": 4, "image_size": 32, "num_classes": 3},
            "poison": {"target_class": 0, "poisoning_rate": 0.2, "label_mode": "dirty"},
            "train": {"epochs": 2},
            "defenses": []
        }),
    );
    let run_dir = dir.path().join("run");
    let summary = run_pipeline(&config, &run_dir).unwrap();
    assert_eq!(summary.trigger, "book");
    assert!(!summary.stages.contains(&"suggest".to_string()));
    assert!(!run_dir.join("suggest").exists());
    // generated dataset: 3 classes x 12 train, poisoned at 0.2
    assert_eq!(summary.poison_count, 7); // floor(0.2 * 36)
    assert!(summary.metrics.ca.is_some());
    assert!(summary.metrics.real_ca.is_none(), "no real split was supplied");
}

#[test]
fn label_only_auto_trigger_without_manifest_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "config.json",
        serde_json::json!({
            "access_level": "label_only",
            "profile": "desk",
            "seed": 3,
            "data": "none",
            "trigger": "auto",
            "poison": {"target_class": 0, "poisoning_rate": 0.2, "label_mode": "dirty"}
        }),
    );
    match run_pipeline(&config, &dir.path().join("run")) {
        Err(e) => assert!(e.is_config(), "expected config error, got {e}"),
        Ok(_) => panic!("config should have been rejected"),
    }
}

#[test]
fn auto_trigger_takes_the_top_moderate_recommendation() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "config.json", mini_edit_config());
    let run_dir = dir.path().join("run");
    let summary = run_pipeline(&config, &run_dir).unwrap();
    // fixture tag rates: pillow 0.8 (high), book 0.3, toy 0.2, lamp 0.05;
    // the top moderate object is "book"
    assert_eq!(summary.trigger, "book");
    let chosen: serde_json::Value = serde_json::from_slice(
        &std::fs::read(run_dir.join("trigger/chosen.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(chosen["source"], "auto");
}

#[test]
fn poisoned_manifest_respects_dirty_label_mode() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "config.json", mini_edit_config());
    let run_dir = dir.path().join("run");
    run_pipeline(&config, &run_dir).unwrap();
    let poisoned = DatasetManifest::load(&run_dir.join("poisoned.jsonl")).unwrap();
    let poison: Vec<_> = poisoned.entries.iter().filter(|e| e.poisoned).collect();
    assert_eq!(poison.len(), 12); // floor(0.1 * 120)
    assert!(poison.iter().all(|e| e.label == 0 && e.split == Split::Train));
    // eval manifest carries triggered val and real_poison splits
    let eval = DatasetManifest::load(&run_dir.join("eval_manifest.jsonl")).unwrap();
    assert!(eval
        .split_entries(Split::Val)
        .iter()
        .any(|e| e.poisoned));
    assert!(!eval.split_entries(Split::RealPoison).is_empty());
}

#[test]
fn resume_of_complete_run_is_a_noop() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "config.json", mini_edit_config());
    let run_dir = dir.path().join("run");
    let first = run_pipeline(&config, &run_dir).unwrap();
    let model_mtime = std::fs::metadata(run_dir.join("train/model.json"))
        .unwrap()
        .modified()
        .unwrap();
    std::thread::sleep(std::time::Duration::from_millis(1100));
    let resumed = resume(&run_dir).unwrap();
    assert_eq!(first.metrics, resumed.metrics);
    let after = std::fs::metadata(run_dir.join("train/model.json"))
        .unwrap()
        .modified()
        .unwrap();
    assert_eq!(model_mtime, after, "complete stages must not recompute");
}

#[test]
fn resume_recomputes_deleted_stage_and_downstream_only() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "config.json", mini_edit_config());
    let run_dir = dir.path().join("run");
    let first = run_pipeline(&config, &run_dir).unwrap();
    let data_mtime = std::fs::metadata(run_dir.join("data/manifest.jsonl"))
        .unwrap()
        .modified()
        .unwrap();
    let pre_model_hash = sha256_file(&run_dir.join("train/model.json")).unwrap();

    std::fs::remove_file(run_dir.join("stages/train.json")).unwrap();
    std::fs::remove_file(run_dir.join("train/model.json")).unwrap();
    std::thread::sleep(std::time::Duration::from_millis(1100));
    let resumed = resume(&run_dir).unwrap();
    assert_eq!(first.metrics, resumed.metrics);

    // upstream untouched, train recomputed deterministically
    let data_after = std::fs::metadata(run_dir.join("data/manifest.jsonl"))
        .unwrap()
        .modified()
        .unwrap();
    assert_eq!(data_mtime, data_after, "upstream stages must be skipped");
    let post_model_hash = sha256_file(&run_dir.join("train/model.json")).unwrap();
    assert_eq!(pre_model_hash, post_model_hash, "retraining must be deterministic");
    let model_mtime = std::fs::metadata(run_dir.join("train/model.json"))
        .unwrap()
        .modified()
        .unwrap();
    assert!(model_mtime > data_after, "train stage must have rerun");
}

#[test]
fn tampered_artifact_refuses_resume_with_hash_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "config.json", mini_edit_config());
    let run_dir = dir.path().join("run");
    run_pipeline(&config, &run_dir).unwrap();

    // flip a byte in an upstream artifact without touching its meta
    let poisoned_path = run_dir.join("poisoned.jsonl");
    let mut bytes = std::fs::read(&poisoned_path).unwrap();
    let idx = bytes.len() / 2;
    bytes[idx] = bytes[idx].wrapping_add(1);
    std::fs::write(&poisoned_path, bytes).unwrap();

    match resume(&run_dir) {
        Err(Error::HashMismatch { path, .. }) => {
            assert!(path.ends_with("poisoned.jsonl"));
        }
        other => panic!("expected hash mismatch, got {other:?}"),
    }
}

#[test]
fn reruns_from_identical_config_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "config.json", mini_edit_config());
    let run_a = dir.path().join("a");
    let run_b = dir.path().join("b");
    run_pipeline(&config, &run_a).unwrap();
    run_pipeline(&config, &run_b).unwrap();
    for artifact in [
        "data/manifest.jsonl",
        "poisoned.jsonl",
        "eval_manifest.jsonl",
        "train/model.json",
        "summary.json",
    ] {
        assert_eq!(
            sha256_file(&run_a.join(artifact)).unwrap(),
            sha256_file(&run_b.join(artifact)).unwrap(),
            "artifact {artifact} differs between reruns"
        );
    }
}

#[test]
fn unknown_backend_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = mini_edit_config();
    config["backends"] = serde_json::json!({"vqa": "hosted-vqa"});
    let config = write_config(dir.path(), "config.json", config);
    match run_pipeline(&config, &dir.path().join("run")) {
        Err(e) => {
            assert!(e.to_string().contains("hosted-vqa"), "got: {e}");
        }
        Ok(_) => panic!("unknown backend should fail"),
    }
}
