use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn curlm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_curlm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn grammar() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/assets/toy_agreement.json")
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.json");
    let json = format!(
        r#"{{
        "paths": {{"corpus_manifest": "out/grammar_manifest.json", "output_dir": "out", "grammar": "{}"}},
        "tokenizer": {{"vocab_size": 128}},
        "model": {{"layers": 1, "heads": 2, "hidden": 16, "intermediate": 32, "vocab_size": 128, "max_len": 32}},
        "optimizer": {{"batch_size": 8}},
        "eval": {{"pairs_per_category": 10, "corpus_sentences": 200}},
        "step_scale": 0.00025{extra}
    }}"#,
        grammar().display()
    );
    std::fs::write(&path, json).unwrap();
    path
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn whole_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    for stage in ["gen-suite", "preprocess", "train-tokenizer", "train"] {
        let o = curlm(&["--config", cfg, stage]);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let ckpt = dir.path().join("out/checkpoints/step_0000100.ckpt");
    let o = curlm(&["--config", cfg, "eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("checkpoint_step=100 macro="), "{}", stdout(&o));
    let results = std::fs::read_to_string(dir.path().join("out/results.csv")).unwrap();
    assert_eq!(results.lines().next(), Some("checkpoint_step,macro,ppx"));

    let mid = dir.path().join("out/checkpoints/step_0000048.ckpt");
    let before = std::fs::read(dir.path().join("out/metrics.csv")).unwrap();
    let o = curlm(&["--config", cfg, "train", "--resume", mid.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("steps=52 from=48"), "{}", stdout(&o));
    assert_eq!(std::fs::read(dir.path().join("out/metrics.csv")).unwrap(), before);
}

#[test]
fn out_and_seed_flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let other = dir.path().join("elsewhere");
    let o = curlm(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        other.to_str().unwrap(),
        "--seed",
        "7",
        "gen-suite",
    ]);
    assert!(o.status.success());
    assert!(other.join("suite.jsonl").exists());
    assert!(!dir.path().join("out").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), r#", "unknown_key": 1"#);
    assert_eq!(
        curlm(&["--config", bad.to_str().unwrap(), "preprocess"]).status.code(),
        Some(2)
    );
    assert_eq!(curlm(&["preprocess"]).status.code(), Some(2));
    assert_eq!(curlm(&["no-such-command"]).status.code(), Some(2));

    let cfg = write_config(dir.path(), "");
    // the manifest is only created by gen-suite
    assert_eq!(
        curlm(&["--config", cfg.to_str().unwrap(), "preprocess"]).status.code(),
        Some(3)
    );
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let o = curlm(&[
        "--config",
        cfg.to_str().unwrap(),
        "eval",
        "--checkpoint",
        junk.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
}
