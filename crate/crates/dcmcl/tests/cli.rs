//! End-to-end checks of the command-line interface: the documented
//! pipeline (gen-data -> train -> evaluate -> decode -> distill),
//! sweep/ablation outputs, the gradcheck command, and exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dcmcl"))
}

fn run_ok(mut cmd: Command) -> Output {
    let out = cmd.output().expect("spawn dcmcl");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json_line(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stdout);
    let line = text.lines().last().expect("json output line");
    serde_json::from_str(line).expect("valid json on stdout")
}

/// Tiny-model override flags shared by the pipeline tests.
fn tiny_sets(extra: &[&str]) -> Vec<String> {
    let mut args = vec![
        "--set".into(),
        "vocab_size=12".into(),
        "--set".into(),
        "d_model=16".into(),
        "--set".into(),
        "d_hidden=32".into(),
        "--set".into(),
        "n_heads=2".into(),
        "--set".into(),
        "n_enc_layers=1".into(),
        "--set".into(),
        "n_dec_layers=1".into(),
        "--set".into(),
        "max_len=8".into(),
        "--set".into(),
        "dropout=0.0".into(),
        "--set".into(),
        "max_steps=4".into(),
        "--set".into(),
        "eval_every=0".into(),
        "--set".into(),
        "batch_tokens=48".into(),
        "--set".into(),
        "max_decode_len=6".into(),
        "--set".into(),
        "nar_iterations=2".into(),
        "--set".into(),
        "length_beam=2".into(),
    ];
    for e in extra {
        args.push("--set".into());
        args.push((*e).into());
    }
    args
}

fn gen_tiny_data(dir: &Path) {
    let mut cmd = bin();
    cmd.args([
        "gen-data",
        "--task",
        "lexicon",
        "--pairs",
        "30",
        "--test-pairs",
        "8",
        "--vocab",
        "12",
        "--min-len",
        "2",
        "--max-len",
        "4",
        "--seed",
        "5",
        "--out-dir",
    ])
    .arg(dir);
    let out = run_ok(cmd);
    let v = json_line(&out);
    assert_eq!(v["train_pairs"], 30);
    assert_eq!(v["test_pairs"], 8);
    assert!(dir.join("train.src").exists() && dir.join("test.tgt").exists());
}

#[test]
fn pipeline_gen_train_evaluate_decode_distill() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen_tiny_data(dir);

    // train
    let mut cmd = bin();
    cmd.arg("train")
        .arg("--train-prefix")
        .arg(dir.join("train"))
        .arg("--out-dir")
        .arg(dir.join("run"))
        .args(["--seed", "3"])
        .args(tiny_sets(&[]));
    let out = run_ok(cmd);
    let v = json_line(&out);
    assert_eq!(v["steps"], 4);
    let ckpt = dir.join("run/final.ckpt");
    assert!(ckpt.exists());

    // evaluate: all metric keys present and numeric
    let mut cmd = bin();
    cmd.arg("evaluate")
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--test-prefix")
        .arg(dir.join("test"))
        .arg("--out-dir")
        .arg(dir.join("eval"))
        .args(tiny_sets(&[]));
    let v = json_line(&run_ok(cmd));
    for key in ["bleu_ar", "bleu_nar", "exact_ar", "exact_nar", "repeat_pct_nar"] {
        assert!(v[key].is_number(), "missing {key} in {v}");
    }

    // decode both modes: one output line per input line
    let n_inputs = std::fs::read_to_string(dir.join("test.src")).unwrap().lines().count();
    for mode in ["ar", "nar"] {
        let mut cmd = bin();
        cmd.arg("decode")
            .arg("--ckpt")
            .arg(&ckpt)
            .arg("--input")
            .arg(dir.join("test.src"))
            .arg("--out-dir")
            .arg(dir.join("dec"))
            .args(["--output", &format!("hyps_{mode}.txt"), "--mode", mode])
            .args(tiny_sets(&[]));
        run_ok(cmd);
        let hyps = std::fs::read_to_string(dir.join(format!("dec/hyps_{mode}.txt"))).unwrap();
        assert_eq!(hyps.lines().count(), n_inputs, "{mode} line-count contract");
    }

    // distill: same pair count, targets re-generated
    let mut cmd = bin();
    cmd.arg("distill")
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--train-prefix")
        .arg(dir.join("train"))
        .arg("--out-dir")
        .arg(dir.join("dist"))
        .args(tiny_sets(&[]));
    let v = json_line(&run_ok(cmd));
    assert_eq!(v["pairs"], 30);
    let src = std::fs::read_to_string(dir.join("dist/distilled.src")).unwrap();
    assert_eq!(src.lines().count(), 30);
}

#[test]
fn evaluate_sweeps_write_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen_tiny_data(dir);
    let mut cmd = bin();
    cmd.arg("train")
        .arg("--train-prefix")
        .arg(dir.join("train"))
        .arg("--out-dir")
        .arg(dir.join("run"))
        .args(["--seed", "3"])
        .args(tiny_sets(&[]));
    run_ok(cmd);
    let ckpt = dir.join("run/final.ckpt");

    let mut cmd = bin();
    cmd.arg("evaluate")
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--test-prefix")
        .arg(dir.join("test"))
        .arg("--out-dir")
        .arg(dir.join("sweep1"))
        .args(["--sweep", "mask-ratio"])
        .args(tiny_sets(&[]));
    run_ok(cmd);
    let csv = std::fs::read_to_string(dir.join("sweep1/mask_ratio_sweep.csv")).unwrap();
    assert!(csv.starts_with("ratio,ml_ar,ml_nar\n"));
    assert_eq!(csv.lines().count(), 6, "header plus five ratios");

    let mut cmd = bin();
    cmd.arg("evaluate")
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--test-prefix")
        .arg(dir.join("test"))
        .arg("--out-dir")
        .arg(dir.join("sweep2"))
        .args(["--sweep", "iterations"])
        .args(tiny_sets(&[]));
    run_ok(cmd);
    let csv = std::fs::read_to_string(dir.join("sweep2/iteration_sweep.csv")).unwrap();
    assert!(csv.starts_with("iterations,bleu_nar,exact_nar\n"));
    assert_eq!(csv.lines().count(), 3, "header plus nar_iterations=2 rows");
}

#[test]
fn ablate_trains_every_combination() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen_tiny_data(dir);
    let mut cmd = bin();
    cmd.arg("ablate")
        .arg("--train-prefix")
        .arg(dir.join("train"))
        .arg("--out-dir")
        .arg(dir.join("abl"))
        .args(["--seed", "3", "--axes", "tml,scl"])
        .args(tiny_sets(&["max_steps=2"]));
    let out = run_ok(cmd);
    let text = String::from_utf8_lossy(&out.stdout);
    let runs: Vec<serde_json::Value> =
        text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(runs.len(), 4, "2 axes -> 4 combinations");
    for combo in ["tml0_scl0", "tml1_scl0", "tml0_scl1", "tml1_scl1"] {
        assert!(runs.iter().any(|r| r["run"] == combo), "missing combo {combo}");
        assert!(dir.join("abl").join(combo).join("final.ckpt").exists());
    }
}

#[test]
fn gradcheck_passes_and_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cmd = bin();
    cmd.arg("gradcheck").arg("--out-dir").arg(tmp.path()).args(["--seed", "2"]);
    let out = cmd.output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("max relative error:"), "stdout: {stdout}");
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn exit_codes_follow_contract() {
    // 0: help
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));

    // 1: usage errors (unknown subcommand, unknown flag)
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = bin().args(["train", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    // 2: runtime failures (missing checkpoint, bad config value)
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .arg("evaluate")
        .arg("--ckpt")
        .arg(tmp.path().join("missing.ckpt"))
        .arg("--test-prefix")
        .arg(tmp.path().join("nope"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin()
        .args(["gen-data", "--task", "bogus", "--out-dir"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin()
        .args(["gradcheck", "--set", "d_model=not_a_number", "--out-dir"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
