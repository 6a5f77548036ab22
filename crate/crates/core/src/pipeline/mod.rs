//! The pipeline stages behind the command-line driver, each reading and
//! writing fixed file names under the run's output directory.

mod config;

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{EvalConfig, PathsConfig, RunConfig, TokenizerConfig, WordClassConfig};

use crate::corpus::{self, pack_sequences, CorpusManifest, Instance, PackConfig, PreprocessReport};
use crate::curriculum::{DataCurriculum, DataInit, DataMode, PoolItem, Trainer, UnigramModel, VocabularyCurriculum};
use crate::error::{Error, Result};
use crate::eval::{self, evaluate_suite, mean_good_perplexity, Grammar, SuiteResult};
use crate::model::{Checkpoint, Model, ModelConfig, Task};
use crate::tokenizer::{Tokenizer, SEP_ID};
use crate::wordclass::{induce, map_clusters, ClusterAssignment, ClusterMapping, WordClassLexicon};

/// File names under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn instances(&self) -> PathBuf {
        self.root.join("instances.jsonl")
    }

    pub fn preprocess_report(&self) -> PathBuf {
        self.root.join("preprocess_report.json")
    }

    pub fn tokenizer(&self) -> PathBuf {
        self.root.join("tokenizer.json")
    }

    pub fn clusters(&self) -> PathBuf {
        self.root.join("clusters.json")
    }

    pub fn mapping_template(&self) -> PathBuf {
        self.root.join("mapping_template.json")
    }

    pub fn lexicon(&self) -> PathBuf {
        self.root.join("lexicon.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.checkpoints().join(format!("step_{step:07}.ckpt"))
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn events(&self) -> PathBuf {
        self.root.join("events.jsonl")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results.csv")
    }

    pub fn grammar_corpus(&self) -> PathBuf {
        self.root.join("grammar_corpus.txt")
    }

    pub fn grammar_manifest(&self) -> PathBuf {
        self.root.join("grammar_manifest.json")
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::data(format!("{}: {e}", path.display()))
}

pub fn cmd_preprocess(cfg: &RunConfig) -> Result<PreprocessReport> {
    let layout = Layout::new(&cfg.paths.output_dir);
    let manifest = CorpusManifest::load(&cfg.paths.corpus_manifest)?;
    let (instances, report) = corpus::preprocess(&manifest)?;
    create_dir(layout.root())?;
    corpus::write_jsonl(&layout.instances(), &instances)?;
    write_json(&layout.preprocess_report(), &report)?;
    log::info!(
        "{} lines in, {} instances, {} words",
        report.lines_in,
        report.instances_out,
        report.words_out
    );
    Ok(report)
}

pub fn cmd_train_tokenizer(cfg: &RunConfig) -> Result<Tokenizer> {
    let layout = Layout::new(&cfg.paths.output_dir);
    let instances = corpus::read_jsonl(&layout.instances())?;
    let texts: Vec<&str> = instances.iter().map(|i| i.text.as_str()).collect();
    let tok = Tokenizer::train(&texts, cfg.tokenizer.vocab_size)?;
    if tok.vocab_size() < cfg.tokenizer.vocab_size {
        log::warn!(
            "corpus supports only {} of {} requested token types",
            tok.vocab_size(),
            cfg.tokenizer.vocab_size
        );
    }
    tok.save(&layout.tokenizer())?;
    Ok(tok)
}

fn encode_all(instances: &[Instance], tok: &Tokenizer) -> Vec<Vec<u32>> {
    instances.iter().map(|i| tok.encode(&i.text)).collect()
}

pub fn cmd_induce_classes(cfg: &RunConfig) -> Result<ClusterAssignment> {
    let layout = Layout::new(&cfg.paths.output_dir);
    let tok = Tokenizer::load(&layout.tokenizer())?;
    let instances = corpus::read_jsonl(&layout.instances())?;
    let seqs: Vec<Vec<u32>> = encode_all(&instances, &tok)
        .into_iter()
        .filter(|s| !s.is_empty())
        .collect();
    let wc = cfg.wordclass;
    let ind = induce(&seqs, wc.num_clusters, cfg.seed, wc.em())?;
    let assignment = ClusterAssignment::from_induction(&ind, &tok, wc.top_types)?;
    assignment.save(&layout.clusters())?;
    match &cfg.paths.cluster_mapping {
        Some(path) => {
            let mapping = ClusterMapping::load(path)?;
            map_clusters(&assignment, &mapping)?.save(&layout.lexicon())?;
        }
        None => {
            assignment.mapping_template().save(&layout.mapping_template())?;
            log::info!(
                "wrote {}; fill in a tag per cluster and set paths.cluster_mapping to build the lexicon",
                layout.mapping_template().display()
            );
        }
    }
    Ok(assignment)
}

/// Model config with the vocabulary size taken from the trained tokenizer.
pub fn effective_model_config(cfg: &RunConfig, tok: &Tokenizer) -> ModelConfig {
    if cfg.model.vocab_size != tok.vocab_size() {
        log::warn!(
            "model vocab_size {} replaced by the tokenizer's {}",
            cfg.model.vocab_size,
            tok.vocab_size()
        );
    }
    ModelConfig {
        vocab_size: tok.vocab_size(),
        ..cfg.model.clone()
    }
}

/// Tokenized training pool. Without packing, instances longer than
/// `max_len` are truncated and empty ones dropped.
pub fn build_pool(instances: &[Instance], tok: &Tokenizer, max_len: usize, pack: bool) -> Result<Vec<PoolItem>> {
    let mut encoded = instances.to_vec();
    for (inst, ids) in encoded.iter_mut().zip(encode_all(instances, tok)) {
        inst.token_ids = ids;
    }
    let items: Vec<PoolItem> = if pack {
        let cfg = PackConfig {
            max_len,
            sep_id: SEP_ID,
            cross_source: false,
        };
        pack_sequences(&encoded, cfg)?
            .into_iter()
            .map(|p| PoolItem {
                instance_id: p.id,
                level: p.level,
                tokens: p.token_ids,
            })
            .collect()
    } else {
        let truncated = encoded.iter().filter(|i| i.token_ids.len() > max_len).count();
        if truncated > 0 {
            log::warn!("{truncated} instances truncated to {max_len} tokens");
        }
        encoded
            .into_iter()
            .filter(|i| !i.token_ids.is_empty())
            .map(|mut i| {
                i.token_ids.truncate(max_len);
                PoolItem {
                    instance_id: i.instance_id,
                    level: i.level,
                    tokens: i.token_ids,
                }
            })
            .collect()
    };
    if items.is_empty() {
        return Err(Error::data("training pool is empty"));
    }
    Ok(items)
}

/// Builds a trainer at step 0 from the preprocessed corpus and tokenizer.
pub fn build_trainer(cfg: &RunConfig) -> Result<(Trainer, Tokenizer)> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.paths.output_dir);
    let tok = Tokenizer::load(&layout.tokenizer())?;
    let instances = corpus::read_jsonl(&layout.instances())?;
    let model_cfg = effective_model_config(cfg, &tok);
    let items = build_pool(&instances, &tok, model_cfg.max_len, cfg.pack)?;
    let tcfg = cfg.train_config();
    let lexicon = if tcfg.curriculum.needs_lexicon() {
        let path = layout.lexicon();
        if !path.exists() {
            return Err(Error::config(format!(
                "this curriculum needs {}; run induce-classes with paths.cluster_mapping set",
                path.display()
            )));
        }
        Some(WordClassLexicon::load(&path)?)
    } else {
        None
    };
    let tasks = tcfg.curriculum.objective.tasks();
    let model = Model::new(model_cfg, &tasks, cfg.seed)?;
    let mut data = DataCurriculum::new(items, tcfg.curriculum.data)?;
    let unigram = match tcfg.curriculum.data {
        Some(d) if d.mode == DataMode::UnigramPpx || d.init == Some(DataInit::Unigram) => {
            let seqs: Vec<Vec<u32>> = data.items().iter().map(|i| i.tokens.clone()).collect();
            Some(UnigramModel::train(&seqs, tok.vocab_size())?)
        }
        _ => None,
    };
    data.score_initial(unigram.as_ref(), cfg.seed)?;
    let vocab = tcfg
        .curriculum
        .vocabulary
        .map(|v| VocabularyCurriculum::new(v.strategy, &tok, lexicon.as_ref()))
        .transpose()?;
    let tags = lexicon
        .as_ref()
        .filter(|_| tasks.iter().any(|&t| t != Task::Mlm))
        .map(|l| l.id_tags(&tok));
    Ok((Trainer::new(model, tcfg, data, vocab, tags)?, tok))
}

#[derive(Debug, Serialize, Deserialize)]
struct MetricRow {
    step: u64,
    task: String,
    loss: f64,
    lr: f64,
    ppx: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub start_step: u64,
    pub steps: u64,
    pub checkpoints: Vec<PathBuf>,
    pub final_losses: BTreeMap<Task, f64>,
}

/// Keeps the header and every metrics row up to `step`.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    let mut rows = Vec::new();
    if path.exists() {
        let mut r = csv::Reader::from_path(path).map_err(csv_error(path))?;
        for row in r.deserialize::<MetricRow>() {
            let row = row.map_err(csv_error(path))?;
            if row.step <= step {
                rows.push(row);
            }
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_error(path))?;
    if rows.is_empty() {
        w.write_record(["step", "task", "loss", "lr", "ppx"])
            .map_err(csv_error(path))?;
    }
    for row in &rows {
        w.serialize(row).map_err(csv_error(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn truncate_events(path: &Path, step: u64) -> Result<()> {
    let mut kept = String::new();
    if path.exists() {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let ev: crate::curriculum::CurriculumEvent = serde_json::from_str(line)?;
            if ev.step <= step {
                kept.push_str(line);
                kept.push('\n');
            }
        }
    }
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn append(path: &Path) -> Result<BufWriter<File>> {
    let f = OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

/// Trains to the scaled step budget, writing a checkpoint at step 0, every
/// checkpoint interval and at the end. On a non-finite loss the run stops
/// and earlier checkpoints are left in place.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    let layout = Layout::new(&cfg.paths.output_dir);
    let (mut trainer, _) = build_trainer(cfg)?;
    create_dir(&layout.checkpoints())?;
    let mut checkpoints = Vec::new();
    match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            trainer.restore(&ck)?;
            log::info!("resumed from {} at step {}", path.display(), trainer.step_index());
        }
        None => {
            let path = layout.checkpoint(0);
            trainer.checkpoint()?.save(&path)?;
            checkpoints.push(path);
        }
    }
    let start_step = trainer.step_index();
    truncate_metrics(&layout.metrics(), start_step)?;
    truncate_events(&layout.events(), start_step)?;
    write_json(&layout.root().join("run_config.json"), cfg)?;

    let metrics_path = layout.metrics();
    let mut metrics = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(append(&metrics_path)?);
    let mut events = append(&layout.events())?;
    let interval = cfg.scaled_checkpoint_interval();
    let mut final_losses = BTreeMap::new();
    while !trainer.is_done() {
        let report = match trainer.step() {
            Ok(r) => r,
            Err(e) => {
                metrics.flush().map_err(|err| Error::io(&metrics_path, err))?;
                if let Some(last) = checkpoints.last() {
                    log::error!("training stopped; last good checkpoint is {}", last.display());
                }
                return Err(e);
            }
        };
        for &(task, loss) in &report.losses {
            metrics
                .serialize(MetricRow {
                    step: report.step,
                    task: task.to_string(),
                    loss,
                    lr: report.lr,
                    ppx: loss.exp(),
                })
                .map_err(csv_error(&metrics_path))?;
            final_losses.insert(task, loss);
        }
        if let Some(ev) = &report.event {
            serde_json::to_writer(&mut events, ev)?;
            events.write_all(b"\n").map_err(|e| Error::io(layout.events(), e))?;
        }
        if report.step % interval == 0 || trainer.is_done() {
            metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
            events.flush().map_err(|e| Error::io(layout.events(), e))?;
            let path = layout.checkpoint(report.step);
            trainer.checkpoint()?.save(&path)?;
            log::info!("step {}: saved {}", report.step, path.display());
            checkpoints.push(path);
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    events.flush().map_err(|e| Error::io(layout.events(), e))?;
    Ok(TrainSummary {
        start_step,
        steps: trainer.step_index() - start_step,
        checkpoints,
        final_losses,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub checkpoint_step: u64,
    #[serde(rename = "macro")]
    pub macro_average: f64,
    pub ppx: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub row: ResultRow,
    pub result: SuiteResult,
    pub csv_path: PathBuf,
}

pub fn checkpoint_step(ck: &Checkpoint) -> Result<u64> {
    ck.meta
        .get("step")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Checkpoint("metadata has no step".into()))
}

/// Scores a checkpoint on a minimal-pair suite, writes the per-category
/// CSV under `eval/` and appends a summary row to `results.csv`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, suite: Option<&Path>) -> Result<EvalSummary> {
    let layout = Layout::new(&cfg.paths.output_dir);
    let ck = Checkpoint::load(checkpoint)?;
    let step = checkpoint_step(&ck)?;
    let tok = Tokenizer::load(&layout.tokenizer())?;
    if ck.config.vocab_size != tok.vocab_size() {
        return Err(Error::config(format!(
            "checkpoint vocabulary {} does not match the tokenizer's {}",
            ck.config.vocab_size,
            tok.vocab_size()
        )));
    }
    let model = ck.model()?;
    let suite_path = suite.map(Path::to_path_buf).unwrap_or_else(|| cfg.suite_path());
    let pairs = eval::read_suite(&suite_path)?;
    let result = evaluate_suite(&model, &tok, &pairs)?;
    let ppx = mean_good_perplexity(&model, &tok, &pairs)?;

    create_dir(&layout.eval_dir())?;
    let stem = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("step_{step:07}"));
    let csv_path = layout.eval_dir().join(format!("{stem}.csv"));
    eval::export_metrics(&result, &csv_path)?;

    let row = ResultRow {
        checkpoint_step: step,
        macro_average: result.macro_average,
        ppx,
    };
    let results = layout.results();
    let fresh = !results.exists();
    let mut w = csv::WriterBuilder::new()
        .has_headers(fresh)
        .from_writer(append(&results)?);
    w.serialize(&row).map_err(csv_error(&results))?;
    w.flush().map_err(|e| Error::io(&results, e))?;
    log::info!("step {step}: macro {:.4}, ppx {ppx:.4}", result.macro_average);
    Ok(EvalSummary { row, result, csv_path })
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error(path))?;
    r.deserialize().map(|row| row.map_err(csv_error(path))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenSuiteSummary {
    pub pairs: usize,
    pub sentences: usize,
    pub suite: PathBuf,
    pub manifest: PathBuf,
}

/// Draws a held-out minimal-pair suite from the grammar, then a training
/// corpus that excludes every sentence in it, plus a one-source manifest
/// for that corpus.
pub fn cmd_gen_suite(cfg: &RunConfig) -> Result<GenSuiteSummary> {
    let layout = Layout::new(&cfg.paths.output_dir);
    let grammar_path = cfg
        .paths
        .grammar
        .as_ref()
        .ok_or_else(|| Error::config("gen-suite needs paths.grammar"))?;
    let grammar = Grammar::load(grammar_path)?;
    let pairs = grammar.generate_suite(cfg.eval.pairs_per_category, cfg.seed)?;
    if pairs.is_empty() {
        return Err(Error::data(format!("grammar {} yields no minimal pairs", grammar.name)));
    }
    let held: HashSet<String> = pairs.iter().flat_map(|p| [p.good.clone(), p.bad.clone()]).collect();
    let sentences = grammar.generate_corpus(cfg.eval.corpus_sentences, cfg.seed, &held)?;

    create_dir(layout.root())?;
    let suite = cfg.suite_path();
    if let Some(dir) = suite.parent() {
        create_dir(dir)?;
    }
    eval::write_suite(&suite, &pairs)?;
    let corpus_path = layout.grammar_corpus();
    let mut text = sentences.join("\n");
    text.push('\n');
    std::fs::write(&corpus_path, text).map_err(|e| Error::io(&corpus_path, e))?;
    let manifest = serde_json::json!({
        "sources": [{"name": grammar.name, "path": "grammar_corpus.txt", "speech": false}],
        "levels": {grammar.name.clone(): 1},
    });
    write_json(&layout.grammar_manifest(), &manifest)?;
    Ok(GenSuiteSummary {
        pairs: pairs.len(),
        sentences: sentences.len(),
        suite,
        manifest: layout.grammar_manifest(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::Tokenizer;

    fn instance(id: u64, text: &str, level: u8) -> Instance {
        Instance {
            instance_id: id,
            text: text.into(),
            source: "s".into(),
            level,
            token_ids: Vec::new(),
            difficulty: 0.0,
        }
    }

    #[test]
    fn pool_truncates_and_drops_empty() {
        let insts = vec![instance(0, "a b c d", 1), instance(1, "", 1), instance(2, "a", 2)];
        let tok = Tokenizer::train(&["a b c d"], 64).unwrap();
        let pool = build_pool(&insts, &tok, 3, false).unwrap();
        assert_eq!(pool.len(), 2);
        assert_eq!(pool[0].tokens.len(), 3);
        assert_eq!((pool[1].instance_id, pool[1].level), (2, 2));
    }

    #[test]
    fn packing_joins_short_instances() {
        let insts = vec![instance(0, "a", 1), instance(1, "b", 1)];
        let tok = Tokenizer::train(&["a b"], 64).unwrap();
        let pool = build_pool(&insts, &tok, 16, true).unwrap();
        assert_eq!(pool.len(), 1);
        assert!(pool[0].tokens.contains(&SEP_ID));
    }

    #[test]
    fn metrics_truncation_keeps_header_and_early_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "step,task,loss,lr,ppx\n1,MLM,2,0.1,7.38\n2,MLM,1,0.1,2.71\n").unwrap();
        truncate_metrics(&path, 1).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "step,task,loss,lr,ppx\n1,MLM,2.0,0.1,7.38\n"
        );
        truncate_metrics(&dir.path().join("new.csv"), 0).unwrap();
        assert_eq!(
            std::fs::read_to_string(dir.path().join("new.csv")).unwrap(),
            "step,task,loss,lr,ppx\n"
        );
    }
}
