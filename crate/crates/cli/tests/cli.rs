use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMOKE: &str = r#"
seed = 4
batch_size = 8

[model]
timesteps = 2
head = "ensemble"
localization_filters = [4, 8, 8]
recognition_filters = [8, 16, 16]
blstm_hidden = 16
region_size = [16, 16]
input_size = [32, 32]

[[stages]]
name = "centered"
epochs = 4
train_size = 64
eval_size = 16

[stages.scene]
canvas = [32, 32]
n_regions = 1
placement = "centered"
digits = [1, 1]
scale = [1, 1]
noise = 0.1
jitter = 1

[stages.optimizer]
kind = "adam"
lr = 3e-3
"#;

const SPEC: &str = r#"
canvas = [32, 32]
n_regions = 2
placement = "grid"
digits = [1, 2]
scale = [1, 1]
seed = 9
"#;

fn stn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stn-ocr")).args(args).env_remove("STN_OCR_OUT").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn metrics(out: &Path) -> Vec<Value> {
    std::fs::read_to_string(out.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// File name and contents of every file below `dir`, sorted.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_writes_requested_splits_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "spec.toml", SPEC);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = stn(&["synth", "--spec", &spec, "--count", "20", "--split", "0.5,0.25,0.25", "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for (split, n) in [("train", 10), ("val", 5), ("test", 5)] {
        let pngs = std::fs::read_dir(a.join(split).join("images"))
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
            .count();
        assert_eq!(pngs, n, "{split}");
    }
    assert_eq!(snapshot(&a), snapshot(&b));
}

#[test]
fn unknown_config_field_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "spec.toml", &format!("{SPEC}\nwobble = 3\n"));
    let o = stn(&["synth", "--spec", &spec, "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("wobble"), "{}", stderr(&o));
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = stn(&["train", "--config", "/nonexistent/run.toml", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/run.toml"), "{}", stderr(&o));
}

#[test]
fn train_eval_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "smoke.toml", SMOKE);
    let out = dir.path().join("run");
    let o = stn(&["train", "--config", &cfg, "--out", s(&out), "--deterministic"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let lines = metrics(&out);
    assert_eq!(lines.len(), 4);
    let last = lines.last().unwrap()["loss"].as_f64().unwrap();
    assert!(last < 11f64.ln(), "final loss {last}");
    let checkpoint = out.join("checkpoints").join("latest.stnocr");
    assert!(checkpoint.is_file());
    assert!(out.join("checkpoints").join("stage-00-centered.stnocr").is_file());

    let spec = write(dir.path(), "eval.toml", "canvas = [32, 32]\ndigits = [1, 1]\nscale = [1, 1]\nnoise = 0.1\njitter = 1\nseed = 4\n");
    let o = stn(&["eval", "--checkpoint", s(&checkpoint), "--config", &spec, "--count", "40", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["samples"], 40);
    assert!((0.0..=1.0).contains(&report["seq_acc"].as_f64().unwrap()));

    let data = dir.path().join("data");
    let synth_spec = write(dir.path(), "synth.toml", SPEC);
    let o = stn(&["synth", "--spec", &synth_spec, "--count", "4", "--out", s(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let image = std::fs::read_dir(data.join("train").join("images"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "png"))
        .unwrap();
    let pred_out = dir.path().join("pred");
    let o = stn(&["predict", "--checkpoint", s(&checkpoint), "--image", s(&image), "--out", s(&pred_out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(pred_out.join("prediction.json")).unwrap()).unwrap();
    let regions = doc["regions"].as_array().unwrap();
    assert_eq!(regions.len(), 1);
    for r in regions {
        let b: Vec<f64> = r["box"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert!(b[0] >= 0.0 && b[1] >= 0.0 && b[2] <= 32.0 && b[3] <= 32.0 && b[0] <= b[2] && b[1] <= b[3]);
        assert!(r["text"].is_string());
    }
    assert!(pred_out.join("annotated.png").is_file());

    let o = stn(&["predict", "--checkpoint", s(&checkpoint), "--image", "/nonexistent/img.png", "--out", s(&pred_out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/img.png"), "{}", stderr(&o));
}

#[test]
fn resumed_training_continues_the_step_counter() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "smoke.toml", SMOKE);
    let out = dir.path().join("run");
    let base = ["train", "--config", &cfg, "--out", s(&out), "--deterministic", "--set", "stages.0.train_size=16"];
    let o = stn(&[&base[..], &["--stop-after", "2"]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(metrics(&out).len(), 2);
    let latest = out.join("checkpoints").join("latest.stnocr");
    let o = stn(&[&base[..], &["--resume", s(&latest)]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let steps: Vec<u64> = metrics(&out).iter().map(|m| m["step"].as_u64().unwrap()).collect();
    assert_eq!(steps, vec![2, 4, 6, 8]);
}

#[test]
fn training_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "smoke.toml", SMOKE);
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let o = stn(&["train", "--config", &cfg, "--out", s(&out), "--deterministic", "--set", "stages.0.epochs=2"]);
            assert!(o.status.success(), "{}", stderr(&o));
            snapshot(&out)
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn gradcheck_passes_and_catches_a_planted_fault() {
    let o = stn(&["gradcheck", "--op", "ctc_loss", "--instances", "20"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = stn(&["gradcheck", "--op", "bilinear_sample", "--inject-fault", "sampler-sign-flip"]);
    assert_eq!(o.status.code(), Some(1));
}
