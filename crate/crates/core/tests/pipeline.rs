use std::path::Path;

use gm3d::data::{format_ply, synth_shape, write_xyz, Dataset, ShapeKind, Split};
use gm3d::model::ModelConfig;
use gm3d::pipeline::*;
use gm3d::probe::{run_probe, ProbeConfig};
use gm3d::Error;
use serde_json::json;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        encoder_depth: 1,
        decoder_depth: 1,
        heads: 2,
        mlp_ratio: 2,
        patch_size: 4,
        n_patches: 8,
        mask_ratio: 0.5,
        ..Default::default()
    }
}

fn write_off(path: &Path, kind: ShapeKind, seed: u64) {
    let c = synth_shape(kind, 40, seed, 0.01).unwrap();
    let mut s = format!("OFF\n{} 0 0\n", c.len());
    for p in &c.points {
        s.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    std::fs::write(path, s).unwrap();
}

/// Three classes stored as XYZ, PLY and OFF files.
fn file_dataset(dir: &Path) -> std::path::PathBuf {
    let mut entries = Vec::new();
    for i in 0..5u64 {
        let split = if i < 4 { "train" } else { "test" };
        let xyz = dir.join(format!("s{i}.xyz"));
        write_xyz(&xyz, &synth_shape(ShapeKind::Sphere, 40, i, 0.01).unwrap()).unwrap();
        let ply = dir.join(format!("t{i}.ply"));
        let torus = synth_shape(ShapeKind::Torus, 40, i, 0.01).unwrap();
        std::fs::write(&ply, format_ply(&torus.points, None).unwrap()).unwrap();
        let off = dir.join(format!("c{i}.off"));
        write_off(&off, ShapeKind::Cube, i);
        entries.push(json!({"path": format!("s{i}.xyz"), "label": 0, "split": split}));
        entries.push(json!({"path": format!("t{i}.ply"), "label": 1, "split": split}));
        entries.push(json!({"path": format!("c{i}.off"), "label": 2, "split": split}));
    }
    let m = dir.join("manifest.json");
    std::fs::write(&m, json!({"class_names": ["sphere", "torus", "cube"], "entries": entries}).to_string()).unwrap();
    m
}

#[test]
fn trains_and_probes_from_files_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = file_dataset(dir.path());
    let ds = Dataset::from_manifest(&manifest).unwrap();
    assert_eq!((ds.count(Split::Train), ds.count(Split::Test)), (12, 3));
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        bootstrap_epochs: 1,
        model: tiny_model(),
        dataset: gm3d::data::DatasetSpec::Manifest(manifest.clone()),
        ..Default::default()
    };
    let ds = cfg.dataset.load().unwrap();
    let (kt, boot) = bootstrap_knowledge_teacher(&cfg, &ds, &RunOptions::default()).unwrap();
    assert_eq!(boot.len(), 3);
    let run = train_run(&cfg, &ds, kt, &RunOptions::default()).unwrap();
    assert_eq!(run.metrics.len(), 6);
    assert!(run.metrics.iter().all(|m| m.l_total.is_finite()));

    let before = run.state.student.digest();
    let report = run_probe(&run.state.student, &ds, &ProbeConfig::default(), 0).unwrap();
    assert_eq!(run.state.student.digest(), before);
    assert_eq!((report.n_train, report.n_test), (12, 3));
    assert!((0.0..=1.0).contains(&report.test_accuracy));
}

#[test]
fn config_files_round_trip_and_reject_unknown_keys() {
    let cfg = TrainConfig {
        model: tiny_model(),
        ..Default::default()
    };
    let text = serde_json::to_string_pretty(&cfg).unwrap();
    assert_eq!(TrainConfig::from_json(&text).unwrap(), cfg);
    assert!(matches!(TrainConfig::from_json(r#"{"epochz": 3}"#), Err(Error::Config(_))));
    assert!(TrainConfig::from_json(r#"{"batch_size": 0}"#).is_err());
    let c = cfg.with_override("momentum", "0.9").unwrap();
    assert_eq!(c.momentum, 0.9);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let cfg = TrainConfig {
        epochs: 1,
        model: tiny_model(),
        ..Default::default()
    };
    let state = TrainState::new(Mode::Gm3d, &cfg, None).unwrap();
    let bytes = encode_checkpoint(&state, Some(&cfg)).unwrap();
    let ck = decode_checkpoint(&bytes, Some(&cfg.model)).unwrap();
    assert_eq!(ck.state, state);
    assert_eq!(ck.train_config.as_ref(), Some(&cfg));

    assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3], None), Err(Error::Truncated(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad, None), Err(Error::VersionMismatch(_))));
    let other = ModelConfig {
        embed_dim: 16,
        ..tiny_model()
    };
    assert!(decode_checkpoint(&bytes, Some(&other)).is_err());

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ck.gm3d");
    save_checkpoint(&p, &state, None).unwrap();
    assert_eq!(load_checkpoint(&p, None).unwrap().state, state);
    assert!(matches!(load_checkpoint(&dir.path().join("missing"), None), Err(Error::Io { .. })));
}
