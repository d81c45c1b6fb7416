use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use salfom::config::AppConfig;

fn salfom(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_salfom")).args(args).env_remove("SALFOM_DATA_ROOT").env("RUST_LOG", "warn").output().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn quick_config(dir: &Path) -> String {
    let mut cfg = AppConfig::desk_scale();
    cfg.train.max_steps = 2;
    cfg.train.val_stride = 3;
    let p = dir.join("quick.toml");
    fs::write(&p, cfg.to_toml().unwrap()).unwrap();
    p.display().to_string()
}

fn count_png(dir: &Path) -> usize {
    fs::read_dir(dir).map(|r| r.filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count()).unwrap_or(0)
}

#[test]
fn synth_train_predict_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    let d = data.to_str().unwrap();
    let cfg = quick_config(tmp.path());

    let o = salfom(&["synth", "--videos", "2", "--frames", "6", "--out", d]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(data.join("meta.toml").is_file());
    assert_eq!(count_png(&data.join("train/001/frames")), 6);

    let run = tmp.path().join("run");
    let o = salfom(&["--config", &cfg, "train", "--data", d, "--out", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    let ckpt = run.join("model.ckpt");
    assert!(ckpt.is_file());
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("\"kind\":\"step\"")).count(), 2, "{log}");

    let pred = tmp.path().join("pred");
    let o = salfom(&["predict", "--checkpoint", ckpt.to_str().unwrap(), "--data", d, "--split", "val", "--out", pred.to_str().unwrap(), "--overlays", tmp.path().join("ov").to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(count_png(&pred.join("003")), 6);
    let overlay = image::open(tmp.path().join("ov/003/00001.png")).unwrap();
    assert_eq!((overlay.width(), overlay.height()), (128, 64));
    let map = image::open(pred.join("003/00001.png")).unwrap().to_luma8();
    assert_eq!(map.dimensions(), (64, 64));

    let report = tmp.path().join("report");
    let o = salfom(&["evaluate", "--pred", pred.to_str().unwrap(), "--data", d, "--report", report.to_str().unwrap(), "--splits", "5", "--pool", "other-frames"]);
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(fs::read_to_string(report.join("report.csv")).unwrap().lines().count(), 7);
    assert!(report.join("report.jsonl").is_file());

    let o = salfom(&["export-features", "--checkpoint", ckpt.to_str().unwrap(), "--data", d, "--split", "train", "--out", tmp.path().join("f").to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(tmp.path().join("f/train/002/00006.sfeat").is_file());
}

#[test]
fn ground_truth_evaluates_to_unit_cc() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    let d = data.to_str().unwrap();
    assert!(salfom(&["synth", "--videos", "1", "--val-videos", "0", "--frames", "3", "--resolution", "32", "--out", d]).status.success());
    let pred = tmp.path().join("pred/001");
    fs::create_dir_all(&pred).unwrap();
    for k in 1..=3 {
        let name = format!("{k:05}.png");
        fs::copy(data.join("train/001/maps").join(&name), pred.join(&name)).unwrap();
    }
    let report = tmp.path().join("r");
    let o = salfom(&["evaluate", "--pred", tmp.path().join("pred").to_str().unwrap(), "--data", d, "--split", "train", "--report", report.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    let mut rows = csv::Reader::from_path(report.join("report.csv")).unwrap();
    let headers = rows.headers().unwrap().clone();
    let cc = headers.iter().position(|h| h == "cc").unwrap();
    let mut n = 0;
    for row in rows.records() {
        let v: f64 = row.unwrap()[cc].parse().unwrap();
        assert!((v - 1.0).abs() < 1e-9);
        n += 1;
    }
    assert_eq!(n, 3);
}

#[test]
fn ablate_single_branch() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    let d = data.to_str().unwrap();
    assert!(salfom(&["synth", "--videos", "1", "--frames", "4", "--out", d]).status.success());
    let cfg = quick_config(tmp.path());
    let json = tmp.path().join("t.json");
    let o = Command::new(env!("CARGO_BIN_EXE_salfom"))
        .args(["--config", &cfg, "ablate", "--branches", "TCFE", "--out", json.to_str().unwrap()])
        .env("SALFOM_DATA_ROOT", d)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", text(&o));
    let table = String::from_utf8_lossy(&o.stdout).to_string();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 2, "{table}");
    assert!(lines[0].contains("AUC-J"));
    assert_eq!(lines[1].split_whitespace().next(), Some("TCFE"));
    let saved: serde_json::Value = serde_json::from_str(&fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(saved["rows"][0]["label"], "TCFE");
}

#[test]
fn usage_and_validation_exit_codes() {
    let o = salfom(&["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).to_lowercase().contains("usage"));
    assert_eq!(salfom(&["--help"]).status.code(), Some(0));

    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[encoder]\npatch_size = 0\n[train]\nlr = -1.0\npatience = 0\n").unwrap();
    assert!(salfom(&["synth", "--videos", "1", "--frames", "2", "--resolution", "16", "--out", tmp.path().join("d").to_str().unwrap()]).status.success());
    let o = salfom(&["--config", cfg.to_str().unwrap(), "train", "--data", tmp.path().join("d").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let msg = text(&o);
    for key in ["patch_size", "train.lr", "train.patience"] {
        assert!(msg.contains(key), "{key} not reported in {msg}");
    }

    let o = salfom(&["train"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("SALFOM_DATA_ROOT"));

    let o = salfom(&["predict", "--checkpoint", "/nonexistent.ckpt", "--data", "/nonexistent", "--out", "/tmp/x", "--split", "bogus"]);
    assert_eq!(o.status.code(), Some(1));
}
