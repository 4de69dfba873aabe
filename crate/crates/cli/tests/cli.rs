// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[harness]
eval_size = 5
max_new = 16

[harness.model]
embed_dim = 16
n_layers = 2
n_heads = 2
ffn_dim = 32

[harness.lm]
epochs = 1

[harness.probe]
epochs = 5
hidden_width = 8
"#;

fn cotsteer(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cotsteer"))
        .args(args)
        .env("COTSTEER_ARTIFACT_ROOT", root)
        .output()
        .expect("spawn cotsteer")
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = cotsteer(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn csv_rows(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn corpus_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(root, &["gen-corpus", "--n", "500", "--seed", "7", "--out", "a.jsonl"]);
    ok(root, &["gen-corpus", "--n", "500", "--seed", "7", "--out", "b.jsonl"]);
    let a = std::fs::read(root.join("a.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(root.join("b.jsonl")).unwrap());
    assert_eq!(a.iter().filter(|&&b| b == b'\n').count(), 500);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("a.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen-corpus");
    assert_eq!(manifest["seeds"]["corpus"], 7);
}

#[test]
fn usage_errors_exit_1_and_name_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = cotsteer(dir.path(), &["gen-corpus", "--operand-min", "5", "--operand-max", "2"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("--operand-min"));
    let out = cotsteer(dir.path(), &["gen-corpus", "--operand-max", "40"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("--operand-max"));
    let out = cotsteer(dir.path(), &["steer", "--method", "bogus"]);
    assert_eq!(code(&out), 1);
    assert_eq!(code(&cotsteer(dir.path(), &["--help"])), 0);

    std::fs::write(dir.path().join("bad.toml"), "[optimizer]\ntua = 0.5\n").unwrap();
    let cfg = dir.path().join("bad.toml");
    let out = cotsteer(dir.path(), &["--config", cfg.to_str().unwrap(), "gen-corpus"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("optimizer.tua"));
}

#[test]
fn missing_artifacts_exit_2_and_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = cotsteer(dir.path(), &["train-lm", "--corpus", "absent.jsonl"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("absent.jsonl"));
    let out = cotsteer(dir.path(), &["bounds-report", "--traces", "no_traces"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("no_traces"));
    let out = cotsteer(dir.path(), &["validate", "nothing.actrec"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn corrupted_activation_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("junk.actrec"), b"NOTREC1........").unwrap();
    let out = cotsteer(dir.path(), &["validate", "junk.actrec"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bad magic"));
}

#[test]
fn full_pipeline_on_a_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_str().unwrap();

    ok(root, &["--config", cfg, "gen-corpus", "--n", "60"]);
    ok(root, &["--config", cfg, "train-lm"]);
    ok(root, &["--config", cfg, "train-lm", "--out", "again.toylm"]);
    assert_eq!(
        std::fs::read(root.join("model.toylm")).unwrap(),
        std::fs::read(root.join("again.toylm")).unwrap()
    );

    ok(root, &["--config", cfg, "capture-toy"]);
    let summary = ok(root, &["validate", "activations.actrec"]);
    let summary: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert!(summary["record_count"].as_u64().unwrap() > 0);

    let table = ok(root, &["--config", cfg, "train-probes", "--top-fraction", "0.5"]);
    let rows = table.lines().filter(|l| l.trim_start().starts_with(|c: char| c.is_ascii_digit())).count();
    assert_eq!(rows, 2 * 3, "{table}");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("probes/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["details"]["top_fraction"], 0.5);
    assert_eq!(manifest["details"]["selected"].as_array().unwrap().len(), 1);

    for m in ["none", "optimize", "c-dim", "c-pca", "c-lr", "p-svm", "da"] {
        ok(root, &["--config", cfg, "steer", "--method", m]);
        let report = root.join(format!("reports/{m}.csv"));
        assert_eq!(csv_rows(&report), 1, "{m}");
        assert!(root.join(format!("traces/{m}/p0000.jsonl")).exists());
    }
    ok(
        root,
        &["--config", cfg, "steer", "--method", "optimize", "--lambda", "0.01", "--tau", "0.9", "--alpha0", "0.1", "--max-iters", "200"],
    );

    ok(root, &["--config", cfg, "sweep", "--param", "lambda", "--grid", "0,0.1,1"]);
    assert_eq!(csv_rows(&root.join("reports/sweep_optimize_lambda.csv")), 3);
    ok(root, &["--config", cfg, "sweep", "--param", "strength", "--method", "c-lr", "--grid", "1,8"]);
    assert_eq!(csv_rows(&root.join("reports/sweep_c-lr_strength.csv")), 2);

    let traces = std::fs::read_dir(root.join("traces/optimize"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "csv"))
        .count();
    if traces > 0 {
        let out = ok(root, &["bounds-report"]);
        assert!(out.contains("in bounds"));
        let text = std::fs::read_to_string(root.join("reports/bounds.csv")).unwrap();
        assert!(text.lines().next().unwrap().contains("in_bounds_fraction"));
    }
}
