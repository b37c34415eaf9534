use std::path::Path;
use std::process::{Command, Output};

fn weakneg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weakneg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write(path: &Path, body: &str) {
    std::fs::write(path, body).unwrap();
}

#[test]
fn generate_train_evaluate_localize() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();

    write(
        &root.join("data.json"),
        r#"{"images_per_split": {"train": 16, "val": 6}, "rng_seed": 4}"#,
    );
    let o = weakneg(&[
        "gen-data",
        "--config",
        &s(&root.join("data.json")),
        "--out",
        &s(&root.join("data")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(root.join("data/train.json").exists() && root.join("data/objects.json").exists());

    write(
        &root.join("train.json"),
        r#"{
            "loss": "wn",
            "epochs": 1,
            "batch_size": 8,
            "train_data": "data/train.json",
            "val_data": "data/val.json",
            "out_dir": "run",
            "model": {"embedder": {"in_channels": 3, "input_size": [64, 64], "embedding_dim": 8,
                      "blocks": [{"kind": "conv", "out_channels": 4, "kernel": 3, "stride": 2},
                                 {"kind": "conv", "out_channels": 8, "kernel": 3, "stride": 2}]},
                      "mlp_hidden": 8}
        }"#,
    );
    let o = weakneg(&["train", "--config", &s(&root.join("train.json"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = root.join("run/checkpoints/final");
    assert!(stdout(&o).contains("final checkpoint"));
    assert!(root.join("run/run_log.jsonl").exists());

    let o = weakneg(&[
        "eval",
        "--checkpoint",
        &s(&ckpt),
        "--data",
        &s(&root.join("data/val.json")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(report["mAP"].as_f64().is_some());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("label,ap,positives"));

    let image = root.join("data/val/img_00000.png");
    let o = weakneg(&[
        "localize",
        "--checkpoint",
        &s(&ckpt),
        "--image",
        &s(&image),
        "--label",
        "red_disk",
        "--out",
        &s(&root.join("maps")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let files: Vec<String> = std::fs::read_dir(root.join("maps"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(files.len(), 2);
    assert!(files.iter().all(|f| f.starts_with("img_00000_red_disk_score")));

    let o = weakneg(&[
        "localize",
        "--checkpoint",
        &s(&ckpt),
        "--image",
        &s(&image),
        "--label",
        "purple_yak",
        "--out",
        &s(&root.join("maps")),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("red_disk"));
}

#[test]
fn gradcheck_passes_every_op() {
    let o = weakneg(&["gradcheck", "--points", "3"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.lines().count() >= 20);
    assert!(!out.contains("FAIL"));
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    write(&cfg, r#"{"epochs": 0, "train_data": "x.json"}"#);
    let o = weakneg(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochs"));
}
