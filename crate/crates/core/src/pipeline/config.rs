use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curriculum::{CurriculumConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{scale_steps, ModelConfig, OptimizerConfig, DEFAULT_MASK_PROB};
use crate::tokenizer::DEFAULT_VOCAB_SIZE;
use crate::wordclass::{EmConfig, DEFAULT_NUM_CLUSTERS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus_manifest: PathBuf,
    pub output_dir: PathBuf,
    /// Grammar file for `gen-suite`.
    #[serde(default)]
    pub grammar: Option<PathBuf>,
    /// Minimal-pair suite; `<output_dir>/suite.jsonl` when absent.
    #[serde(default)]
    pub suite: Option<PathBuf>,
    /// Hand-written cluster to tag mapping.
    #[serde(default)]
    pub cluster_mapping: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub vocab_size: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            vocab_size: DEFAULT_VOCAB_SIZE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WordClassConfig {
    pub num_clusters: usize,
    pub max_iters: usize,
    pub tol: f64,
    /// Most frequent types listed per cluster to guide hand mapping.
    pub top_types: usize,
}

impl Default for WordClassConfig {
    fn default() -> Self {
        let em = EmConfig::default();
        Self {
            num_clusters: DEFAULT_NUM_CLUSTERS,
            max_iters: em.max_iters,
            tol: em.tol,
            top_types: 20,
        }
    }
}

impl WordClassConfig {
    pub fn em(&self) -> EmConfig {
        EmConfig {
            max_iters: self.max_iters,
            tol: self.tol,
            ..EmConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub pairs_per_category: usize,
    /// Training sentences `gen-suite` samples from the grammar.
    pub corpus_sentences: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pairs_per_category: 100,
            corpus_sentences: 20_000,
        }
    }
}

/// One JSON file drives every stage. Step counts are given at full scale
/// and multiplied by `step_scale` when training starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    #[serde(default)]
    pub tokenizer: TokenizerConfig,
    #[serde(default = "ModelConfig::small")]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub curriculum: CurriculumConfig,
    #[serde(default)]
    pub wordclass: WordClassConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_step_scale")]
    pub step_scale: f64,
    #[serde(default = "default_mask_prob")]
    pub mask_prob: f64,
    #[serde(default = "default_checkpoint_interval")]
    pub checkpoint_interval: u64,
    /// Concatenate short instances up to the model length.
    #[serde(default)]
    pub pack: bool,
}

fn default_step_scale() -> f64 {
    1.0
}

fn default_mask_prob() -> f64 {
    DEFAULT_MASK_PROB
}

fn default_checkpoint_interval() -> u64 {
    25_000
}

impl RunConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(json).map_err(|e| Error::config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config; relative paths are taken from the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        p.corpus_manifest = base.join(&p.corpus_manifest);
        p.output_dir = base.join(&p.output_dir);
        for x in [&mut p.grammar, &mut p.suite, &mut p.cluster_mapping]
            .into_iter()
            .flatten()
        {
            *x = base.join(&*x);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_scale > 0.0 && self.step_scale.is_finite()) {
            return Err(Error::config(format!(
                "step_scale {} must be positive",
                self.step_scale
            )));
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return Err(Error::config(format!(
                "mask_prob {} must lie in (0, 1)",
                self.mask_prob
            )));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::config("checkpoint_interval must be positive"));
        }
        if self.tokenizer.vocab_size <= crate::tokenizer::NUM_SPECIALS {
            return Err(Error::config(
                "tokenizer vocab_size leaves no room beyond the special tokens",
            ));
        }
        if self.wordclass.num_clusters < 2 {
            return Err(Error::config("wordclass needs at least two clusters"));
        }
        self.model.validate()?;
        self.optimizer.validate()?;
        self.optimizer.scaled(self.step_scale).validate()?;
        self.curriculum.validate()
    }

    pub fn suite_path(&self) -> PathBuf {
        self.paths
            .suite
            .clone()
            .unwrap_or_else(|| self.paths.output_dir.join("suite.jsonl"))
    }

    pub fn scaled_checkpoint_interval(&self) -> u64 {
        scale_steps(self.checkpoint_interval, self.step_scale)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer.scaled(self.step_scale),
            curriculum: self.curriculum.scaled(self.step_scale),
            mask_prob: self.mask_prob,
            seed: self.seed,
        }
    }
}
