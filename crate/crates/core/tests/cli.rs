//! End-to-end tests of the `warmsum` binary: exit codes, the subcommand
//! pipeline and resumable experiment runs.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn warmsum(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_warmsum"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

const TINY_MODEL: &str = r#"{"vocab_size": 1, "d_model": 8, "n_heads": 2, "d_ff": 16, "n_enc_layers": 1, "n_dec_layers": 1, "max_positions": 12, "dropout": 0.0}"#;

fn tiny_experiment(output_dir: &str, finetune_steps: usize) -> String {
    format!(
        r#"{{"data": {{"corpus": {{"kind": "synthetic", "n_examples": 60, "n_words": 12, "body_len_min": 5, "body_len_max": 7, "lead_k": 3}}}},
 "tokenizer": {{"vocab_size": 48}},
 "model": {TINY_MODEL},
 "pretrain": {{"total_steps": 5, "warmup_steps": 1, "batch_size": 4, "max_src_len": 10, "eval_every": 5}},
 "finetune": {{"total_steps": {finetune_steps}, "warmup_steps": 1, "batch_size": 4, "max_src_len": 10, "max_tgt_len": 6, "eval_every": 5}},
 "decoding": {{"max_len": 5}},
 "seeds": [1, 2],
 "output_dir": "{output_dir}"}}"#
    )
}

#[test]
fn help_and_usage_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(warmsum(&["--help"], dir.path()).status.code(), Some(0));
    assert_eq!(warmsum(&["--version"], dir.path()).status.code(), Some(0));
    assert_eq!(warmsum(&["no-such-command"], dir.path()).status.code(), Some(1));
    assert_eq!(warmsum(&["stats"], dir.path()).status.code(), Some(1));
}

#[test]
fn warm_assembly_without_encoder_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    for mode in ["warm2warm", "warm2rnd"] {
        let out = warmsum(&["assemble", "--mode", mode, "--out", "x.ckpt"], dir.path());
        assert_eq!(out.status.code(), Some(1));
        assert!(String::from_utf8_lossy(&out.stderr).contains("--encoder"));
    }
    assert!(!dir.path().join("x.ckpt").exists());
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = warmsum(&["stats", "--corpus", "missing.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    fs::write(dir.path().join("bad.jsonl"), "{\"id\": \"a\", \"body\": \"x\"}\n").unwrap();
    let out = warmsum(&["stats", "--corpus", "bad.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn evaluate_identical_files_scores_100() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.txt"), "hôm nay trời đẹp\nxin chào các bạn\n").unwrap();
    let text = ok(&warmsum(
        &["evaluate", "--candidates", "a.txt", "--references", "a.txt", "--csv", "scores.csv"],
        dir.path(),
    ));
    assert_eq!(text.lines().count(), 3);
    for line in text.lines() {
        assert!(line.ends_with("P 100.00 R 100.00 F1 100.00"), "{line}");
    }
    assert!(dir.path().join("scores.csv").exists());
}

#[test]
fn config_defaults_parse_back() {
    let dir = tempfile::tempdir().unwrap();
    let json = ok(&warmsum(&["config", "--print-defaults"], dir.path()));
    let parsed = warmsum::harness::ExperimentConfig::from_json(&json).unwrap();
    assert_eq!(parsed, warmsum::harness::ExperimentConfig::default());
}

#[test]
fn subcommand_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("model.json"), TINY_MODEL).unwrap();
    fs::write(
        d.join("train.json"),
        r#"{"total_steps": 6, "warmup_steps": 2, "batch_size": 4, "max_src_len": 10, "max_tgt_len": 6, "eval_every": 3}"#,
    )
    .unwrap();
    ok(&warmsum(&["synth", "--out", "corpus.jsonl", "--n", "40", "--seed", "3"], d));
    ok(&warmsum(&["tokenizer-train", "--corpus", "corpus.jsonl", "--vocab-size", "60", "--out", "vocab.txt"], d));
    ok(&warmsum(
        &[
            "pretrain", "--corpus", "corpus.jsonl", "--vocab", "vocab.txt", "--model-config", "model.json",
            "--train-config", "train.json", "--out", "enc.ckpt",
        ],
        d,
    ));
    let metrics = fs::read_to_string(d.join("enc.metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,split,loss,rouge_l\n"));
    ok(&warmsum(&["assemble", "--mode", "WARM2WARM", "--encoder", "enc.ckpt", "--seed", "4", "--out", "w2w.ckpt"], d));
    let head = fs::read(d.join("w2w.ckpt")).unwrap();
    assert_eq!(&head[..8], b"WSUMCKPT");
    ok(&warmsum(
        &[
            "finetune", "--checkpoint", "w2w.ckpt", "--vocab", "vocab.txt", "--train", "corpus.jsonl", "--dev",
            "corpus.jsonl", "--train-config", "train.json", "--out", "tuned.ckpt",
        ],
        d,
    ));
    let bodies: String = warmsum::corpus::load_jsonl(&d.join("corpus.jsonl"))
        .unwrap()
        .iter()
        .take(5)
        .map(|e| format!("{}\n", e.body))
        .collect();
    fs::write(d.join("bodies.txt"), bodies).unwrap();
    for beam in ["0", "3"] {
        ok(&warmsum(
            &[
                "generate", "--checkpoint", "tuned.ckpt", "--vocab", "vocab.txt", "--input", "bodies.txt", "--out",
                "summaries.txt", "--beam-size", beam, "--max-len", "6", "--max-src-len", "10",
            ],
            d,
        ));
        assert_eq!(fs::read_to_string(d.join("summaries.txt")).unwrap().lines().count(), 5);
    }
    ok(&warmsum(&["evaluate", "--candidates", "summaries.txt", "--references", "summaries.txt"], d));
}

#[test]
fn experiment_run_is_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.json"), tiny_experiment("out", 5)).unwrap();
    let first = warmsum(&["run", "--config", "tiny.json"], d);
    let table = ok(&first);
    assert!(String::from_utf8_lossy(&first.stderr).contains("6 cells computed, 0 reused"));
    assert_eq!(table.lines().filter(|l| l.contains("median")).count(), 3);

    let ckpt = d.join("out/cells/WARM2WARM_seed1/model.ckpt");
    let stamp = fs::metadata(&ckpt).unwrap().modified().unwrap();
    let second = warmsum(&["run", "--config", "tiny.json"], d);
    assert_eq!(ok(&second), table);
    assert!(String::from_utf8_lossy(&second.stderr).contains("0 cells computed, 6 reused"));
    assert_eq!(fs::metadata(&ckpt).unwrap().modified().unwrap(), stamp);

    assert_eq!(ok(&warmsum(&["report", "--dir", "out"], d)), table);
    assert_eq!(fs::read_to_string(d.join("out/results.txt")).unwrap(), table);

    // a dropped result is recomputed, bit for bit
    fs::remove_file(d.join("out/cells/RND2RND_seed2/result.json")).unwrap();
    let third = warmsum(&["run", "--config", "tiny.json"], d);
    assert_eq!(ok(&third), table);
    assert!(String::from_utf8_lossy(&third.stderr).contains("1 cells computed, 5 reused"));

    // a different config over the same directory is refused
    fs::write(d.join("other.json"), tiny_experiment("out", 6)).unwrap();
    let clash = warmsum(&["run", "--config", "other.json"], d);
    assert!(!clash.status.success());
}
