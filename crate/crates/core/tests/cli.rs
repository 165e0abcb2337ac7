use std::path::Path;
use std::process::{Command, Output};

use gm3d::data::{synth_shape, write_xyz, ShapeKind};
use serde_json::json;

fn gm3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gm3d")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn field<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .flat_map(|l| l.split_whitespace())
        .find_map(|t| t.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key}= in {text}"))
}

fn tiny_config(dir: &Path) -> String {
    let cfg = json!({
        "epochs": 2,
        "batch_size": 4,
        "bootstrap_epochs": 1,
        "model": {"embed_dim": 8, "encoder_depth": 1, "decoder_depth": 1, "heads": 2,
                  "mlp_ratio": 2, "patch_size": 4, "n_patches": 8, "mask_ratio": 0.5},
        "curriculum": {"e_max": 2, "max_ratio": 0.5},
        "loss": {"warmup_epochs": 1},
        "dataset": {"synthetic": {"train_per_class": 2, "test_per_class": 1, "n_points": 32}}
    });
    let p = dir.join("tiny.json");
    std::fs::write(&p, cfg.to_string()).unwrap();
    p.to_str().unwrap().to_string()
}

fn pretrain(cfg: &str, out: &Path) -> Output {
    gm3d(&["pretrain", "--config", cfg, "--out", out.to_str().unwrap(), "--quiet"])
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(gm3d(&[]).status.code(), Some(1));
    assert_eq!(gm3d(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(gm3d(&["--threads", "0", "check-grad"]).status.code(), Some(1));
    assert_eq!(gm3d(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.gm3d");
    let o = gm3d(&["gc-export", "--checkpoint", missing.to_str().unwrap(), "--input", "x.xyz", "--out", "y.ply"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
    let o = gm3d(&["mask-demo", "--epoch", "0", "--override", "no_such_key=1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn pretrain_is_reproducible_and_feeds_probe_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = pretrain(&cfg, &a);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(field(&stdout(&o), "steps"), "4");
    let o = gm3d(&["--threads", "2", "pretrain", "--config", &cfg, "--out", b.to_str().unwrap(), "--quiet"]);
    assert!(o.status.success());
    let csv = std::fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(csv, std::fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(std::fs::read(a.join("checkpoint.gm3d")).unwrap(), std::fs::read(b.join("checkpoint.gm3d")).unwrap());
    assert!(a.join("bootstrap_checkpoint.gm3d").exists());
    let ck = a.join("checkpoint.gm3d");
    let ck = ck.to_str().unwrap();

    // probe on a two-class manifest
    let mut entries = Vec::new();
    for (label, kind) in [(0, "sphere"), (1, "cube")] {
        for i in 0..6 {
            let split = if i < 4 { "train" } else { "test" };
            entries.push(json!({"synthetic": {"kind": kind, "n_points": 32, "seed": i}, "label": label, "split": split}));
        }
    }
    let manifest = dir.path().join("m.json");
    std::fs::write(&manifest, json!({"class_names": ["sphere", "cube"], "entries": entries}).to_string()).unwrap();
    let o = gm3d(&["probe", "--checkpoint", ck, "--data", manifest.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let acc: f64 = field(&stdout(&o), "accuracy").parse().unwrap();
    assert!((0.0..=1.0).contains(&acc) && (acc * 4.0).fract() == 0.0);

    let one = dir.path().join("one.json");
    let e: Vec<_> = entries.iter().filter(|e| e["label"] == 0).cloned().collect();
    std::fs::write(&one, json!({"class_names": ["sphere", "cube"], "entries": e}).to_string()).unwrap();
    let o = gm3d(&["probe", "--checkpoint", ck, "--data", one.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    // gc-export colors: one color per patch, red + blue = 255, both extremes present
    let input = dir.path().join("torus.xyz");
    write_xyz(&input, &synth_shape(ShapeKind::Torus, 40, 3, 0.01).unwrap()).unwrap();
    let ply = dir.path().join("gc.ply");
    let o = gm3d(&["gc-export", "--checkpoint", ck, "--input", input.to_str().unwrap(), "--out", ply.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&ply).unwrap();
    assert!(text.contains("element vertex 32"));
    let body = text.split("end_header\n").nth(1).unwrap();
    let colors: Vec<(u32, u32, u32)> = body
        .lines()
        .map(|l| {
            let t: Vec<u32> = l.split_whitespace().skip(3).map(|v| v.parse().unwrap()).collect();
            (t[0], t[1], t[2])
        })
        .collect();
    assert_eq!(colors.len(), 32);
    assert!(colors.iter().all(|&(r, g, b)| g == 0 && r + b == 255));
    for group in colors.chunks(4) {
        assert!(group.iter().all(|c| *c == group[0]));
    }
    assert!(colors.iter().any(|c| c.0 == 255) && colors.iter().any(|c| c.0 == 0));
    assert!(gc_export_matches_loaded_geometry(&ply));
}

fn gc_export_matches_loaded_geometry(ply: &Path) -> bool {
    let cloud = gm3d::data::load_pointcloud(ply).unwrap();
    cloud.points.iter().all(|p| p.iter().map(|v| v * v).sum::<f32>() <= 1.0 + 1e-4)
}

#[test]
fn resume_of_a_finished_run_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let full = dir.path().join("full");
    assert!(pretrain(&cfg, &full).status.success());
    let csv = std::fs::read(full.join("metrics.csv")).unwrap();
    let ck = std::fs::read(full.join("checkpoint.gm3d")).unwrap();
    let o = gm3d(&["pretrain", "--config", &cfg, "--out", full.to_str().unwrap(), "--resume", "--quiet"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(full.join("metrics.csv")).unwrap(), csv);
    assert_eq!(std::fs::read(full.join("checkpoint.gm3d")).unwrap(), ck);
    let bad = dir.path().join("fresh");
    let o = gm3d(&["pretrain", "--config", &cfg, "--out", bad.to_str().unwrap(), "--resume", "--quiet"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn mask_demo_follows_the_curriculum() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = gm3d(&["mask-demo", "--config", &cfg, "--epoch", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    assert_eq!(field(&s, "n_masked"), "4");
    assert_eq!(field(&s, "n_sel"), "0");
    let o = gm3d(&["mask-demo", "--config", &cfg, "--epoch", "2", "--shape", "torus"]);
    let s = stdout(&o);
    assert_eq!(field(&s, "n_sel"), "2");
    let masked: Vec<usize> = field(&s, "masked").split(',').map(|v| v.parse().unwrap()).collect();
    let visible: Vec<usize> = field(&s, "visible").split(',').map(|v| v.parse().unwrap()).collect();
    let scores: Vec<f32> = field(&s, "scores").split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(masked.len(), 4);
    let mut all: Vec<usize> = masked.iter().chain(&visible).cloned().collect();
    all.sort();
    assert_eq!(all, (0..8).collect::<Vec<_>>());
    // the two highest-scoring patches are masked
    let mut idx: Vec<usize> = (0..8).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    assert!(masked.contains(&idx[0]) && masked.contains(&idx[1]));
    assert_eq!(o.stdout, gm3d(&["mask-demo", "--config", &cfg, "--epoch", "2", "--shape", "torus"]).stdout);
}
