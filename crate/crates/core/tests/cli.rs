use std::fs;
use std::path::Path;
use std::process::Command;

use xray2em::cli::{run_cli, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VALIDATION};

fn run(args: &[&str]) -> i32 {
    run_cli(std::iter::once("xray2em").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SEG_CONFIG: &str = r#"{"iterations": 10, "lr": 0.002, "network": {"base_channels": 4, "depth": 2}}"#;
const TRAIN_CONFIG: &str = r#"{
    "epochs": 2, "constant_epochs": 1, "steps_per_epoch": 2, "crop": [16, 16, 16],
    "architecture": {"generator_base_channels": 4, "generator_depth": 2,
                     "discriminator_base_channels": 4, "discriminator_layers": 2}
}"#;

fn phantoms(dir: &Path, count: &str, seed: &str) -> std::path::PathBuf {
    let data = dir.join("data");
    let code = run(&["make-phantom", "--out", p(&data), "--count", count, "--size", "16x32x32", "--seed", seed, "--cells", "8"]);
    assert_eq!(code, EXIT_OK);
    data
}

#[test]
fn make_phantom_writes_triples_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = phantoms(dir.path(), "3", "7");
    for seed in 7..10 {
        for kind in ["em", "xray", "labels"] {
            assert!(data.join(format!("pair_{seed}_{kind}.raw")).exists(), "{seed} {kind}");
        }
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["rng"], "ChaCha8");
    assert_eq!(manifest["pairs"].as_array().unwrap().len(), 3);
    assert_eq!(manifest["config"]["size"], serde_json::json!([16, 32, 32]));

    // The resolved config alone reproduces the output.
    let again = dir.path().join("again");
    let mut cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(data.join("config.json")).unwrap()).unwrap();
    cfg["out"] = serde_json::json!(p(&again));
    let cfg_path = dir.path().join("phantom.json");
    fs::write(&cfg_path, cfg.to_string()).unwrap();
    assert_eq!(run(&["make-phantom", "--config", p(&cfg_path)]), EXIT_OK);
    for f in ["pair_8_em.raw", "pair_9_labels.raw", "pair_7_xray.raw"] {
        assert_eq!(fs::read(data.join(f)).unwrap(), fs::read(again.join(f)).unwrap());
    }
}

#[test]
fn usage_and_validation_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(run(&["train", "--no-such-flag"]), EXIT_USAGE);
    assert_eq!(run(&["make-phantom", "--out", "x", "--size", "64x96"]), EXIT_USAGE);
    let out = dir.path().join("run");
    assert_eq!(run(&["train", "--variant", "full3d_seg", "--data", "data", "--out", p(&out)]), EXIT_VALIDATION);
    let missing = dir.path().join("no_seg");
    let data = phantoms(dir.path(), "1", "0");
    let cfg = dir.path().join("train.json");
    fs::write(&cfg, TRAIN_CONFIG).unwrap();
    let code = run(&[
        "train", "--config", p(&cfg), "--variant", "full3d_seg", "--data", p(&data), "--seg-ckpt", p(&missing), "--out", p(&out),
    ]);
    assert_eq!(code, EXIT_VALIDATION);
    assert_eq!(run(&["--device", "tpu", "plot", "--history", "h.csv", "--out", p(&out)]), EXIT_VALIDATION);
    let missing_volume = dir.path().join("nothing.v3d");
    let code = run(&["eval", "--pred", p(&missing_volume), "--target", p(&missing_volume), "--out", p(&out)]);
    assert_eq!(code, EXIT_VALIDATION);
    // An output directory that cannot be created is a runtime failure.
    let blocked = data.join("manifest.json").join("sub");
    assert_eq!(run(&["plot", "--history", "h.csv", "--out", p(&blocked)]), EXIT_RUNTIME);
}

#[test]
fn binary_reports_single_line_errors() {
    let out = Command::new(env!("CARGO_BIN_EXE_xray2em"))
        .args(["train", "--variant", "full3d_seg", "--data", "d", "--out", "o"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_VALIDATION));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error[validation]: configuration error"), "{err}");
    let out = Command::new(env!("CARGO_BIN_EXE_xray2em")).arg("--nope").output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert_eq!(String::from_utf8(out.stderr).unwrap().trim_end().lines().count(), 1);
}

#[test]
fn full_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = phantoms(dir.path(), "2", "3");
    let seg_cfg = dir.path().join("seg.json");
    fs::write(&seg_cfg, SEG_CONFIG).unwrap();
    let seg = dir.path().join("seg");
    assert_eq!(run(&["train-seg", "--config", p(&seg_cfg), "--data", p(&data), "--out", p(&seg)]), EXIT_OK);
    assert!(seg.join("ckpt/params.bin").exists() && seg.join("losses.csv").exists());

    let train_cfg = dir.path().join("train.json");
    fs::write(&train_cfg, TRAIN_CONFIG).unwrap();
    let train = |out: &Path| {
        run(&[
            "train", "--config", p(&train_cfg), "--variant", "full3d_seg", "--data", p(&data), "--seg-ckpt", p(&seg),
            "--out", p(out), "--deterministic",
        ])
    };
    let (a, b) = (dir.path().join("run_a"), dir.path().join("run_b"));
    assert_eq!(train(&a), EXIT_OK);
    assert_eq!(train(&b), EXIT_OK);
    let history = fs::read_to_string(a.join("history.csv")).unwrap();
    assert_eq!(history, fs::read_to_string(b.join("history.csv")).unwrap());
    assert_eq!(history.lines().count(), 5);
    assert!(a.join("ckpt/epoch_1/params.bin").exists() && a.join("ckpt/epoch_2/params.bin").exists());

    // Re-running from the resolved config with no other flags.
    let c = dir.path().join("run_c");
    let mut cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["deterministic"], true);
    cfg["out"] = serde_json::json!(p(&c));
    let resolved = dir.path().join("resolved.json");
    fs::write(&resolved, cfg.to_string()).unwrap();
    assert_eq!(run(&["train", "--config", p(&resolved)]), EXIT_OK);
    assert_eq!(fs::read_to_string(c.join("history.csv")).unwrap(), history);

    let rec = dir.path().join("rec");
    let xray = data.join("pair_3_xray.v3d");
    assert_eq!(run(&["reconstruct", "--ckpt", p(&a), "--input", p(&xray), "--out", p(&rec)]), EXIT_OK);
    assert!(rec.join("mean.raw").exists() && rec.join("variance.raw").exists() && rec.join("config.json").exists());

    let report = dir.path().join("report");
    let code = run(&[
        "eval", "--pred", p(&rec.join("mean.v3d")), "--target", p(&data.join("pair_3_em.v3d")),
        "--labels", p(&data.join("pair_3_labels.v3d")), "--seg-ckpt", p(&seg),
        "--variance", p(&rec.join("variance.v3d")), "--out", p(&report),
    ]);
    assert_eq!(code, EXIT_OK);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(report.join("report.json")).unwrap()).unwrap();
    for key in ["XY", "XZ", "YZ"] {
        assert!(r["psnr"][key].is_number() && r["ssim"][key].is_number(), "{key}");
    }
    for key in ["XY", "XZ", "YZ", "3D"] {
        assert!(r["jaccard"][key].is_number() && r["dice"][key].is_number(), "{key}");
    }
    assert!(report.join("uncertainty/panels.json").exists());

    let plots = dir.path().join("plots");
    assert_eq!(run(&["plot", "--history", p(&a.join("history.csv")), "--out", p(&plots)]), EXIT_OK);
    assert!(plots.join("history.png").exists() && plots.join("config.json").exists());
}
