use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sft"))
        .args(args)
        .output()
        .expect("spawn sft")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn small_data(dir: &Path, seed: &str) {
    let o = sft(&[
        "gen-data",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        seed,
        "--per-meter-train",
        "1",
        "--per-meter-test",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn unknown_subcommand_and_flag_are_usage_errors() {
    assert_eq!(code(&sft(&["fly"])), 1);
    assert_eq!(code(&sft(&["train", "--bogus"])), 1);
    assert_eq!(code(&sft(&[])), 1);
    assert_eq!(code(&sft(&["--help"])), 0);
}

#[test]
fn eval_without_checkpoint_is_usage_error() {
    let o = sft(&["eval", "--data", "x", "--out", "y"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--checkpoint"));
}

#[test]
fn bad_config_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"train": {"epochz": 3}}"#).unwrap();
    let o = sft(&["train", "--config", cfg.to_str().unwrap(), "--data", "d", "--out", "o"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    fs::write(&cfg, r#"{"train": {"batch_size": 0}}"#).unwrap();
    let o = sft(&["train", "--config", cfg.to_str().unwrap(), "--data", "d", "--out", "o"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn missing_data_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = sft(&[
        "train",
        "--data",
        dir.path().join("nothing").to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("manifest.csv"), "{}", stderr(&o));
}

#[test]
fn gen_data_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    small_data(a.path(), "7");
    small_data(b.path(), "7");
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.len(), 16 + 16 + 1);
    assert!(ta == tb);
}

#[test]
fn corrupt_clip_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path(), "3");
    let victim = dir.path().join("train/clip_00002.gvid");
    let mut bytes = fs::read(&victim).unwrap();
    bytes[0] = b'X';
    fs::write(&victim, bytes).unwrap();
    let o = sft(&[
        "train",
        "--data",
        dir.path().to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
        "--epochs",
        "1",
    ]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("clip_00002.gvid") && err.contains("magic"), "{err}");
}

#[test]
fn train_eval_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_data(&data, "11");
    let run = dir.path().join("run");
    let o = sft(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--epochs",
        "1",
        "--seed",
        "5",
        "--loss",
        "ce",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = run.join("checkpoint.sft");
    assert!(ckpt.exists());
    let log: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("train_log.json")).unwrap()).unwrap();
    assert_eq!(log.as_array().unwrap().len(), 1);

    let before = fs::read(&ckpt).unwrap();
    let report_dir = dir.path().join("report");
    let o = sft(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        report_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(&ckpt).unwrap(), before);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(report_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n"], 16);
    assert_eq!(report["confusion"].as_array().unwrap().len(), 10);
    let csv = fs::read_to_string(report_dir.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("metric,value\n"));

    let o = sft(&[
        "predict",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--clip",
        data.join("test/clip_00000.gvid").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let p: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let probs: Vec<f64> = p["probabilities"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(probs.len(), 10);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    assert!(p["class_id"].as_u64().unwrap() < 10);
}

#[test]
fn compare_writes_rows_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_data(&data, "2");
    let out = dir.path().join("cmp");
    let o = sft(&[
        "compare",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seeds",
        "1,2,3",
        "--epochs",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("comparison.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "seed,loss_mode,accuracy,mean_loss,map,far_bin_accuracy");
    assert_eq!(lines.len(), 1 + 6 + 1);
    assert!(lines[7].starts_with("mean_diff,"));

    let o = sft(&["compare", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seeds", "1,2"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn gradcheck_f64_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g.json");
    let o = sft(&["gradcheck", "--precision", "f64", "--instances", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("matmul") && stdout.contains("sft"));
    assert!(!stdout.contains("FAIL"));
    assert!(out.exists());
}
