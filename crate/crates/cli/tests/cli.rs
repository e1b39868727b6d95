use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hsrkan::io::{decode_pgm, read_hsc};
use hsrkan::model::HsrKanModel;
use hsrkan::trainer::evaluate;
use hsrkan::{Checkpoint, MetricReport, ModelConfig, TrainConfig};
use serde_json::Value;
use tempfile::TempDir;

fn hsrkan(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsrkan"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = hsrkan(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Two degraded 16x16 patches with 8 bands in `ds/`.
fn dataset(dir: &Path) {
    ok(dir, &["synth", "--seed", "3", "--bands", "8", "--size", "16", "--count", "2", "--out", "raw"]);
    ok(dir, &["degrade", "--data", "raw", "--scale", "4", "--out", "ds"]);
}

const TINY: &[&str] = &["--hidden", "4", "--blocks", "1", "--epochs", "2", "--batch-size", "2", "--eval-every", "1"];

fn train(dir: &Path, out: &str, extra: &[&str]) -> String {
    let mut args = vec!["train", "--data", "ds", "--val", "ds", "--out", out];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(dir, &args);
    fs::read_to_string(dir.join(out).join("train_log.csv")).unwrap()
}

#[test]
fn synth_is_reproducible_and_round_trips() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    for out in ["a", "b"] {
        ok(d, &["synth", "--seed", "7", "--bands", "6", "--size", "8", "--count", "3", "--out", out]);
    }
    for i in 0..3 {
        let name = format!("{i:04}_z.hsc");
        let a = fs::read(d.join("a").join(&name)).unwrap();
        assert_eq!(a, fs::read(d.join("b").join(&name)).unwrap());
        let cube = read_hsc(d.join("a").join(&name)).unwrap();
        assert_eq!((cube.bands(), cube.height(), cube.width()), (6, 8, 8));
        assert_eq!(hsrkan::io::encode_hsc(&cube).unwrap(), a);
    }
    let manifest: Value = serde_json::from_str(&fs::read_to_string(d.join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "synth");
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 3);
    assert_eq!(manifest["version"], hsrkan::VERSION);
}

#[test]
fn config_errors_exit_with_code_two() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let out = hsrkan(d, &["synth", "--size", "0", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    assert_eq!(hsrkan(d, &["train", "--data", "missing", "--out", "r"]).status.code(), Some(2));
    assert_eq!(hsrkan(d, &["report", "--grid", "0"]).status.code(), Some(2));
    let bad_threads = Command::new(env!("CARGO_BIN_EXE_hsrkan"))
        .env("HSRKAN_THREADS", "zero")
        .arg("report")
        .output()
        .unwrap();
    assert_eq!(bad_threads.status.code(), Some(2));
}

#[test]
fn degrade_writes_only_into_out() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    dataset(d);
    let mut raw: Vec<_> = fs::read_dir(d.join("raw")).unwrap().map(|e| e.unwrap().file_name()).collect();
    raw.sort();
    assert_eq!(raw, ["0000_z.hsc", "0001_z.hsc", "manifest.json"]);
    let x = read_hsc(d.join("ds/0000_x.hsc")).unwrap();
    let y = read_hsc(d.join("ds/0000_y.hsc")).unwrap();
    assert_eq!((x.bands(), x.height()), (3, 16));
    assert_eq!((y.bands(), y.height()), (8, 4));
}

#[test]
fn train_writes_checkpoint_and_log_deterministically() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    dataset(d);
    let a = train(d, "run_a", &["--seed", "5"]);
    let b = train(d, "run_b", &["--seed", "5"]);
    assert_eq!(a, b);
    assert_eq!(fs::read(d.join("run_a/checkpoint.hsrk")).unwrap(), fs::read(d.join("run_b/checkpoint.hsrk")).unwrap());
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], "step,epoch,lr,l1,sparse_l1,sparse_entropy,total,val_psnr");
    assert_eq!(lines.len(), 3);
    for row in &lines[1..] {
        let f: Vec<&str> = row.split(',').collect();
        assert!(f[4].parse::<f64>().unwrap() >= 0.0);
        assert!(f[6].parse::<f64>().unwrap().is_finite());
    }
    let eff: Value = serde_json::from_str(&fs::read_to_string(d.join("run_a/effective_config.json")).unwrap()).unwrap();
    assert_eq!(eff["model"]["hsi_bands"], 8);
    assert_eq!(eff["model"]["hidden"], 4);
    assert_eq!(eff["train"]["seed"], 5);
}

#[test]
fn no_sparse_loss_zeroes_sparse_columns() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    dataset(d);
    let log = train(d, "run", &["--no-sparse-loss"]);
    for row in log.lines().skip(1) {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[4].parse::<f64>().unwrap(), 0.0);
        assert_eq!(f[5].parse::<f64>().unwrap(), 0.0);
        assert_eq!(f[3], f[6], "total equals the reconstruction term");
    }
}

#[test]
fn no_cab_flag_reaches_the_model() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    dataset(d);
    train(d, "run", &["--no-cab"]);
    let ckpt = Checkpoint::load(d.join("run/checkpoint.hsrk")).unwrap();
    assert!(!ckpt.model.config().channel_attention);
}

#[test]
fn model_config_file_is_merged_and_checked() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    dataset(d);
    fs::write(d.join("m.json"), r#"{"hidden": 6, "spline": {"grid_size": 3}}"#).unwrap();
    train(d, "run", &["--model-config", "m.json"]);
    let ckpt = Checkpoint::load(d.join("run/checkpoint.hsrk")).unwrap();
    let cfg = ckpt.model.config();
    // `--hidden 4` in the shared flags overrides the file.
    assert_eq!((cfg.hidden, cfg.spline.grid_size, cfg.spline.order), (4, 3, 3));
    fs::write(d.join("bad.json"), r#"{"hsi_bands": 31}"#).unwrap();
    let out = hsrkan(d, &["train", "--data", "ds", "--out", "bad", "--model-config", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_of_zero_model_matches_upsampled_baseline() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    dataset(d);
    let cfg = ModelConfig { hsi_bands: 8, msi_bands: 3, hidden: 4, blocks: 1, scale: 4, ..ModelConfig::toy() };
    let model = HsrKanModel::zeroed(cfg).unwrap();
    Checkpoint::from_model(model, TrainConfig::default()).save(d.join("zero.hsrk")).unwrap();
    let stdout = ok(d, &["eval", "--checkpoint", "zero.hsrk", "--data", "ds", "--out", "ev"]);
    let mean: MetricReport = serde_json::from_str(stdout.trim()).unwrap();
    let samples: Vec<_> = (0..2)
        .map(|i| hsrkan::degradation::Sample {
            x: read_hsc(d.join(format!("ds/{i:04}_x.hsc"))).unwrap(),
            y: read_hsc(d.join(format!("ds/{i:04}_y.hsc"))).unwrap(),
            z: read_hsc(d.join(format!("ds/{i:04}_z.hsc"))).unwrap(),
        })
        .collect();
    let base = evaluate(None, &samples, 4).unwrap();
    assert_eq!(mean, base);

    let report: Value = serde_json::from_str(&fs::read_to_string(d.join("ev/report.json")).unwrap()).unwrap();
    for key in ["psnr", "ssim", "sam", "ergas"] {
        assert!(report["mean"][key].is_number(), "{key}");
    }
    assert_eq!(report["samples"].as_array().unwrap().len(), 2);
    let (w, h, _) = decode_pgm(&fs::read(d.join("ev/0001_sqerr.pgm")).unwrap()).unwrap();
    assert_eq!((w, h), (16, 16));
    assert_eq!(read_hsc(d.join("ev/0000_pred.hsc")).unwrap().bands(), 8);
}

#[test]
fn metrics_of_identical_cubes() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--bands", "5", "--size", "16", "--out", "raw"]);
    let line = ok(d, &["metrics", "raw/0000_z.hsc", "raw/0000_z.hsc", "--scale", "4"]);
    assert_eq!(line.lines().count(), 1);
    let r: Value = serde_json::from_str(&line).unwrap();
    assert_eq!(r["psnr"], "inf");
    assert_eq!(r["ssim"], 1.0);
    assert_eq!(r["sam"], 0.0);
    assert_eq!(r["ergas"], 0.0);
}

#[test]
fn gradcheck_op_scope_passes_and_names_results() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let out = ok(d, &["gradcheck", "--scope", "op", "--seed", "1", "--out", "gc"]);
    assert!(out.lines().any(|l| l.starts_with("PASS") && l.contains("edge_l1")));
    assert!(!out.contains("FAIL"));
    let json: Value = serde_json::from_str(&fs::read_to_string(d.join("gc/gradcheck.json")).unwrap()).unwrap();
    assert!(json.as_array().unwrap().iter().all(|r| r["passed"] == true));
}

#[test]
fn report_table_and_json_agree() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let table = ok(d, &["report"]);
    let json: Value = serde_json::from_str(&ok(d, &["report", "--json"])).unwrap();
    let total = json["report"]["total"].as_u64().unwrap();
    let row = table.lines().find(|l| l.starts_with("total")).unwrap();
    assert_eq!(row.split_whitespace().last().unwrap().parse::<u64>().unwrap(), total);
    for m in json["report"]["modules"].as_array().unwrap() {
        let name = m[0].as_str().unwrap();
        let line = table.lines().find(|l| l.split_whitespace().next() == Some(name)).unwrap();
        assert_eq!(line.split_whitespace().last().unwrap().parse::<u64>().unwrap(), m[1].as_u64().unwrap());
    }
    let g7: Value = serde_json::from_str(&ok(d, &["report", "--json", "--grid", "7"])).unwrap();
    let edges = json["report"]["kan_edges"].as_u64().unwrap();
    assert_eq!(g7["report"]["total"].as_u64().unwrap() - total, 2 * edges);
}
