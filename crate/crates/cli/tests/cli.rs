use std::path::Path;
use std::process::{Command, Output};

fn arithlm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arithlm")).args(args).output().expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        "[task]\noperand_bits = 3\n[train]\nepochs = 2\nbatch_size = 8\n[model]\nd_model = 16\nd_ff = 32\nnum_heads = 2\nencoder_layers = 1\ndecoder_layers = 1\n",
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn list_presets_names_every_experiment() {
    let out = arithlm(&["list-presets"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let names: Vec<&str> = text.lines().filter_map(|l| l.split_whitespace().next()).collect();
    for n in [
        "add-random", "mul-random", "add-vst", "add-vsv", "mul-vst", "mul-vsv", "rand-output", "plain-order-add", "plain-order-mul",
        "ablation-squeeze", "ablation-h1", "ablation-d32", "ablation-nope", "ablation-noattn", "ablation-noffn", "nanogpt-add",
        "nanogpt-mul", "nanogpt-vst", "nanogpt-vsv",
    ] {
        assert!(names.contains(&n), "missing {n}");
    }
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(arithlm(&["--no-such-flag", "list-presets"]).status.code(), Some(2));
    assert_eq!(arithlm(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(arithlm(&["discontinuity", "--bits", "seven"]).status.code(), Some(2));
    assert_eq!(arithlm(&[]).status.code(), Some(2));
}

#[test]
fn help_exits_cleanly() {
    assert_eq!(arithlm(&["--help"]).status.code(), Some(0));
}

#[test]
fn failed_runs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = arithlm(&["run-preset", "no-such-preset", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no-such-preset"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nno_such_key = 1\n").unwrap();
    let out = arithlm(&["train", "--config", bad.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));

    let out = arithlm(&["eval", "--checkpoint", dir.path().join("missing.ckpt").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn discontinuity_table_matches_reference_cells() {
    let dir = tempfile::tempdir().unwrap();
    let out = arithlm(&["discontinuity", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(std::fs::read_to_string(dir.path().join("discontinuity.csv")).unwrap(), text);
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(2).map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 15);
    assert_eq!(rows[0][0], 1.0);
    assert!((rows[2][3] - 0.279).abs() <= 0.005);
    for r in &rows {
        assert_eq!(r.len(), 9);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn gen_data_writes_every_pair() {
    let dir = tempfile::tempdir().unwrap();
    let out = arithlm(&["gen-data", "--op", "mul", "--split", "vsv", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let data = std::fs::read_to_string(dir.path().join("dataset.txt")).unwrap();
    assert_eq!(data.lines().count(), 16384);
    let split: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("split.json")).unwrap()).unwrap();
    assert_eq!(split["validation"].as_array().unwrap().len(), 4096);
    let last = data.lines().last().unwrap();
    assert!(last.starts_with("127 127 *"), "{last}");
}

#[test]
fn preset_run_produces_layout_and_reruns_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let out = arithlm(&["run-preset", "add-smoke", "--seed", "4", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut names: Vec<String> = std::fs::read_dir(&run).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["checkpoints", "manifest.json", "metrics.csv", "reports"]);
    assert!(run.join("checkpoints/final.ckpt").exists());
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "epoch,loss,train_token_acc,val_token_acc,train_seq_acc,val_seq_acc,mae");
    assert_eq!(metrics.lines().count(), 3);

    let again = dir.path().join("again");
    let out = arithlm(&[
        "run-preset",
        "--from-manifest",
        run.join("manifest.json").to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(metrics, std::fs::read_to_string(again.join("metrics.csv")).unwrap());

    let eval_dir = dir.path().join("eval");
    let out = arithlm(&[
        "eval",
        "--checkpoint",
        run.join("checkpoints/final.ckpt").to_str().unwrap(),
        "--preset",
        "add-smoke",
        "--config",
        &cfg,
        "--seed",
        "4",
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(eval_dir.join("reports/eval.json")).unwrap()).unwrap();
    let last_row = metrics.lines().last().unwrap().split(',').map(str::to_string).collect::<Vec<_>>();
    let val_seq: f64 = last_row[5].parse().unwrap();
    assert_eq!(report["validation"]["sequence_accuracy"].as_f64().unwrap(), val_seq);
}

#[test]
fn several_seeds_get_their_own_directories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("multi");
    let out = arithlm(&["run-preset", "add-smoke", "--seeds", "1,2", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("seed-1/metrics.csv").exists());
    assert!(run.join("seed-2/metrics.csv").exists());
    assert!(run.join("mean_metrics.csv").exists());
    assert_ne!(
        std::fs::read(run.join("seed-1/metrics.csv")).unwrap(),
        std::fs::read(run.join("seed-2/metrics.csv")).unwrap()
    );
}
