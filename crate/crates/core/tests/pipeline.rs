use std::path::{Path, PathBuf};

use curlm::model::{Checkpoint, CHECKPOINT_MAGIC};
use curlm::pipeline::{self, read_results, Layout, RunConfig};
use curlm::wordclass::{ClusterAssignment, ClusterMapping, Tag};
use curlm::Error;

fn grammar_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/toy_agreement.json")
}

fn tiny_config(dir: &Path, extra: &str) -> RunConfig {
    let json = format!(
        r#"{{
        "paths": {{"corpus_manifest": "grammar_manifest.json", "output_dir": "."}},
        "tokenizer": {{"vocab_size": 256}},
        "model": {{"layers": 1, "heads": 2, "hidden": 16, "intermediate": 32, "vocab_size": 256, "max_len": 32}},
        "optimizer": {{"batch_size": 8}},
        "eval": {{"pairs_per_category": 20, "corpus_sentences": 400}},
        "step_scale": 0.0005{extra}
    }}"#
    );
    let mut cfg = RunConfig::from_json(&json).unwrap();
    cfg.resolve_paths(dir);
    cfg.paths.grammar = Some(grammar_path());
    cfg
}

fn prepared(extra: &str) -> (tempfile::TempDir, RunConfig) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), extra);
    pipeline::cmd_gen_suite(&cfg).unwrap();
    pipeline::cmd_preprocess(&cfg).unwrap();
    pipeline::cmd_train_tokenizer(&cfg).unwrap();
    (dir, cfg)
}

fn write_manifest(dir: &Path, sources: &[(&str, &str, &str)]) -> PathBuf {
    let mut entries = Vec::new();
    let mut levels = Vec::new();
    for (i, (name, file, body)) in sources.iter().enumerate() {
        std::fs::write(dir.join(file), body).unwrap();
        entries.push(format!(r#"{{"name": "{name}", "path": "{file}", "speech": false}}"#));
        levels.push(format!(r#""{name}": {}"#, i + 1));
    }
    let manifest = dir.join("manifest.json");
    std::fs::write(
        &manifest,
        format!(
            r#"{{"sources": [{}], "levels": {{{}}}}}"#,
            entries.join(","),
            levels.join(",")
        ),
    )
    .unwrap();
    manifest
}

fn corpus_config(dir: &Path) -> RunConfig {
    let json = r#"{"paths": {"corpus_manifest": "manifest.json", "output_dir": "out"}}"#;
    let mut cfg = RunConfig::from_json(json).unwrap();
    cfg.resolve_paths(dir);
    cfg
}

#[test]
fn preprocess_counts_match_hand_count() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(
        dir.path(),
        &[
            ("one", "a.txt", "The cat sat.\n\nA dog ran home\n"),
            ("two", "b.txt", "page 12\nbirds sing\n"),
            ("three", "c.txt", "x y z w\n"),
        ],
    );
    let cfg = corpus_config(dir.path());
    let r = pipeline::cmd_preprocess(&cfg).unwrap();
    // 6 lines; the blank line and the page number are dropped; 3 + 4 + 2 + 4 words
    assert_eq!((r.lines_in, r.instances_out, r.words_out), (6, 4, 13));
    let layout = Layout::new(&cfg.paths.output_dir);
    let first = std::fs::read(layout.instances()).unwrap();
    pipeline::cmd_preprocess(&cfg).unwrap();
    assert_eq!(std::fs::read(layout.instances()).unwrap(), first);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(layout.preprocess_report()).unwrap()).unwrap();
    assert_eq!(report["words_out"], 13);
}

#[test]
fn preprocess_errors() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("manifest.json"), r#"{"sources": []}"#).unwrap();
    let cfg = corpus_config(dir.path());
    assert!(matches!(pipeline::cmd_preprocess(&cfg), Err(Error::Config(_))));

    std::fs::write(
        dir.path().join("manifest.json"),
        r#"{"sources": [{"name": "ghost", "path": "nowhere.txt"}], "levels": {"ghost": 1}}"#,
    )
    .unwrap();
    let err = pipeline::cmd_preprocess(&cfg).unwrap_err();
    assert!(err.to_string().contains("ghost"), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn train_writes_checkpoints_metrics_and_evaluates() {
    let (_dir, cfg) = prepared("");
    let layout = Layout::new(&cfg.paths.output_dir);
    let s = pipeline::cmd_train(&cfg, None).unwrap();
    assert_eq!(s.steps, 200);
    // step 0, every 13 steps, and the last step
    assert_eq!(s.checkpoints.len(), 1 + 200 / 13 + 1);
    let metrics = std::fs::read_to_string(layout.metrics()).unwrap();
    assert!(metrics.starts_with("step,task,loss,lr,ppx\n"));
    // one MLM row per step, except steps whose batch drew no masked position
    let steps: Vec<u64> = metrics
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(steps.len() > 190 && steps.windows(2).all(|w| w[0] < w[1]) && steps[steps.len() - 1] <= 200);
    let row: Vec<&str> = metrics.lines().nth(5).unwrap().split(',').collect();
    let (loss, ppx): (f64, f64) = (row[2].parse().unwrap(), row[4].parse().unwrap());
    assert!((loss.exp() - ppx).abs() < 1e-12 * ppx);

    pipeline::cmd_eval(&cfg, &layout.checkpoint(0), None).unwrap();
    let last = pipeline::cmd_eval(&cfg, s.checkpoints.last().unwrap(), None).unwrap();
    let rows = read_results(&layout.results()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0].checkpoint_step, rows[1].checkpoint_step), (0, 200));
    assert_eq!(rows[1], last.row);
    assert!(last.csv_path.ends_with("eval/step_0000200.csv"));

    let again = pipeline::cmd_eval(&cfg, s.checkpoints.last().unwrap(), None).unwrap();
    assert_eq!(again.result, last.result);
}

#[test]
fn eval_rejects_bad_checkpoints() {
    let (dir, cfg) = prepared("");
    let layout = Layout::new(&cfg.paths.output_dir);
    pipeline::cmd_train(&cfg, None).unwrap();
    let good = std::fs::read(layout.checkpoint(0)).unwrap();

    let mut corrupt = good.clone();
    corrupt[0] ^= 0xff;
    let path = dir.path().join("corrupt.ckpt");
    std::fs::write(&path, &corrupt).unwrap();
    assert!(matches!(
        pipeline::cmd_eval(&cfg, &path, None),
        Err(Error::Checkpoint(_))
    ));

    let mut future = good;
    future[CHECKPOINT_MAGIC.len()..CHECKPOINT_MAGIC.len() + 4].copy_from_slice(&7u32.to_le_bytes());
    std::fs::write(&path, &future).unwrap();
    let err = pipeline::cmd_eval(&cfg, &path, None).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");
    assert!(!layout.results().exists());
}

#[test]
fn non_finite_loss_aborts_and_keeps_checkpoints() {
    let (_dir, mut cfg) = prepared("");
    cfg.optimizer.peak_lr = 1e250;
    let layout = Layout::new(&cfg.paths.output_dir);
    let err = pipeline::cmd_train(&cfg, None).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    assert_eq!(err.exit_code(), 4);
    let ck = Checkpoint::load(&layout.checkpoint(0)).unwrap();
    assert!(ck.model().is_ok());
}

#[test]
fn resume_truncates_later_metrics() {
    let (_dir, cfg) = prepared("");
    let layout = Layout::new(&cfg.paths.output_dir);
    pipeline::cmd_train(&cfg, None).unwrap();
    let full = std::fs::read(layout.metrics()).unwrap();
    let s = pipeline::cmd_train(&cfg, Some(&layout.checkpoint(104))).unwrap();
    assert_eq!((s.start_step, s.steps), (104, 96));
    assert_eq!(std::fs::read(layout.metrics()).unwrap(), full);
}

#[test]
fn word_class_curricula_need_a_lexicon() {
    let extra = r#", "curriculum": {"objective": {"mode": "sequential", "entries": [["POS10", 0, 12.5], ["MLM", 12.5, 100]]}}, "wordclass": {"num_clusters": 4, "max_iters": 5}"#;
    let (dir, mut cfg) = prepared(extra);
    let layout = Layout::new(&cfg.paths.output_dir);
    assert!(matches!(pipeline::cmd_train(&cfg, None), Err(Error::Config(_))));

    let assignment = pipeline::cmd_induce_classes(&cfg).unwrap();
    assert!(layout.mapping_template().exists() && !layout.lexicon().exists());
    let loaded = ClusterAssignment::load(&layout.clusters()).unwrap();
    assert_eq!(loaded, assignment);

    let tags = [Tag::Noun, Tag::Verb, Tag::Det, Tag::Adj];
    let mapping = ClusterMapping((0..4).map(|c| (c, tags[c])).collect());
    let mapping_path = dir.path().join("mapping.json");
    mapping.save(&mapping_path).unwrap();
    cfg.paths.cluster_mapping = Some(mapping_path);
    pipeline::cmd_induce_classes(&cfg).unwrap();
    assert!(layout.lexicon().exists());
    let s = pipeline::cmd_train(&cfg, None).unwrap();
    assert!(s.final_losses.contains_key(&curlm::model::Task::Mlm));
}

#[test]
fn vanilla_and_curriculum_runs_both_report() {
    let curricula = [
        "",
        r#", "curriculum": {"vocabulary": {"strategy": "token_id"}, "data": {"mode": "unigram_ppx"}}"#,
    ];
    for extra in curricula {
        let (_dir, cfg) = prepared(extra);
        let s = pipeline::cmd_train(&cfg, None).unwrap();
        let e = pipeline::cmd_eval(&cfg, s.checkpoints.last().unwrap(), None).unwrap();
        assert_eq!(e.row.checkpoint_step, 200);
        assert!(e.row.ppx.is_finite() && (0.0..=1.0).contains(&e.row.macro_average));
    }
}

#[test]
fn gen_suite_needs_a_grammar_and_holds_out_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path(), "");
    let g = pipeline::cmd_gen_suite(&cfg).unwrap();
    assert_eq!((g.pairs, g.sentences), (40, 400));
    let suite = curlm::eval::read_suite(&g.suite).unwrap();
    let corpus = std::fs::read_to_string(Layout::new(dir.path()).grammar_corpus()).unwrap();
    assert!(suite.iter().all(|p| !corpus.lines().any(|l| l == p.good)));
    cfg.paths.grammar = None;
    assert!(matches!(pipeline::cmd_gen_suite(&cfg), Err(Error::Config(_))));
}
