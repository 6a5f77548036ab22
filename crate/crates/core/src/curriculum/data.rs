use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::unigram::UnigramModel;
use crate::error::{Error, Result};
use crate::model::{pseudo_perplexity, scale_steps, MaskedLm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    /// Difficulty is the source corpus level.
    Source,
    /// Difficulty is a fixed unigram perplexity.
    UnigramPpx,
    /// Difficulty is the current model's pseudo-perplexity, refreshed
    /// periodically.
    ModelPpx,
}

/// Difficulty used by [`DataMode::ModelPpx`] before the first rescore.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataInit {
    Unigram,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub mode: DataMode,
    #[serde(default)]
    pub init: Option<DataInit>,
    #[serde(default = "default_interval")]
    pub rescore_interval: u64,
    #[serde(default = "default_interval")]
    pub first_switch: u64,
}

fn default_interval() -> u64 {
    25_000
}

impl DataConfig {
    pub fn new(mode: DataMode) -> Self {
        Self {
            mode,
            init: None,
            rescore_interval: default_interval(),
            first_switch: default_interval(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rescore_interval == 0 {
            return Err(Error::config("rescore_interval must be positive"));
        }
        if self.mode == DataMode::ModelPpx && self.init.is_none() {
            return Err(Error::config(
                "model_ppx difficulty needs an init (unigram or random) for the steps before the first rescore",
            ));
        }
        Ok(())
    }

    pub fn scaled(&self, step_scale: f64) -> Self {
        Self {
            rescore_interval: scale_steps(self.rescore_interval, step_scale),
            first_switch: scale_steps(self.first_switch, step_scale),
            ..*self
        }
    }

    /// Number of rescoring events in a run of `max_steps` steps.
    pub fn expected_rescores(&self, max_steps: u64) -> u64 {
        if self.mode != DataMode::ModelPpx || max_steps < self.first_switch {
            return 0;
        }
        let first = self.first_switch.div_ceil(self.rescore_interval) * self.rescore_interval;
        if first > max_steps {
            0
        } else {
            (max_steps - first) / self.rescore_interval + 1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolItem {
    pub instance_id: u64,
    pub level: u8,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumEvent {
    pub step: u64,
    pub event: String,
    pub pool_size: usize,
}

/// Training pool kept sorted from easiest to hardest.
#[derive(Debug, Clone)]
pub struct DataCurriculum {
    config: Option<DataConfig>,
    items: Vec<PoolItem>,
    difficulty: Vec<f64>,
    order: Vec<usize>,
    rescores: u64,
}

impl DataCurriculum {
    /// A pool without a curriculum samples uniformly from everything.
    pub fn new(items: Vec<PoolItem>, config: Option<DataConfig>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::data("the training pool is empty"));
        }
        if let Some(c) = &config {
            c.validate()?;
        }
        let n = items.len();
        let mut dc = Self {
            config,
            items,
            difficulty: vec![0.0; n],
            order: (0..n).collect(),
            rescores: 0,
        };
        dc.sort();
        Ok(dc)
    }

    fn sort(&mut self) {
        let (d, items) = (&self.difficulty, &self.items);
        self.order.sort_by(|&a, &b| {
            d[a].total_cmp(&d[b])
                .then(items[a].instance_id.cmp(&items[b].instance_id))
        });
    }

    pub fn config(&self) -> Option<&DataConfig> {
        self.config.as_ref()
    }

    pub fn items(&self) -> &[PoolItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Item indices from easiest to hardest.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn difficulties(&self) -> &[f64] {
        &self.difficulty
    }

    pub fn rescores(&self) -> u64 {
        self.rescores
    }

    pub fn set_difficulties(&mut self, difficulty: Vec<f64>) -> Result<()> {
        if difficulty.len() != self.items.len() {
            return Err(Error::data("difficulty count does not match the pool"));
        }
        self.difficulty = difficulty;
        self.sort();
        Ok(())
    }

    pub(crate) fn restore(&mut self, difficulty: Vec<f64>, rescores: u64) -> Result<()> {
        self.set_difficulties(difficulty)?;
        self.rescores = rescores;
        Ok(())
    }

    /// Difficulties before training starts.
    pub fn score_initial(&mut self, unigram: Option<&UnigramModel>, seed: u64) -> Result<()> {
        let Some(cfg) = self.config else {
            return Ok(());
        };
        let need_unigram = || unigram.ok_or_else(|| Error::config("unigram difficulty needs a unigram model"));
        let scores = match (cfg.mode, cfg.init) {
            (DataMode::Source, _) => self.items.iter().map(|it| it.level as f64).collect(),
            (DataMode::UnigramPpx, _) | (DataMode::ModelPpx, Some(DataInit::Unigram)) => {
                let um = need_unigram()?;
                self.items
                    .iter()
                    .map(|it| um.perplexity(&it.tokens))
                    .collect::<Result<Vec<_>>>()?
            }
            (DataMode::ModelPpx, Some(DataInit::Random)) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(5);
                self.items.iter().map(|_| rng.random::<f64>()).collect()
            }
            (DataMode::ModelPpx, None) => return Err(Error::config("model_ppx difficulty needs an init")),
        };
        self.set_difficulties(scores)
    }

    /// Scores every pool item with the model's pseudo-perplexity.
    pub fn score_with_model<M: MaskedLm + Sync>(&mut self, model: &M) -> Result<()> {
        let scores = self
            .items
            .par_iter()
            .map(|it| pseudo_perplexity(model, &it.tokens))
            .collect::<Result<Vec<_>>>()?;
        self.set_difficulties(scores)
    }

    pub fn is_rescore_step(&self, step: u64) -> bool {
        matches!(self.config, Some(c) if c.mode == DataMode::ModelPpx
            && step >= c.first_switch
            && step.is_multiple_of(c.rescore_interval))
    }

    pub fn maybe_rescore<M: MaskedLm + Sync>(&mut self, model: &M, step: u64) -> Result<Option<CurriculumEvent>> {
        if !self.is_rescore_step(step) {
            return Ok(None);
        }
        self.score_with_model(model)?;
        self.rescores += 1;
        Ok(Some(CurriculumEvent {
            step,
            event: "rescore".into(),
            pool_size: self.items.len(),
        }))
    }

    /// Size of the easiest-first window at competence `c`, widened to hold
    /// a full batch.
    pub fn window(&self, competence: f64, batch_size: usize) -> usize {
        let n = self.items.len();
        if self.config.is_none() {
            return n;
        }
        let w = ((competence * n as f64) - 1e-9).ceil().max(0.0) as usize;
        w.max(batch_size).min(n)
    }

    /// Uniform sample without replacement from the current window; returns
    /// item indices.
    pub fn competence_sample<R: Rng>(&self, competence: f64, batch_size: usize, rng: &mut R) -> Vec<usize> {
        let w = self.window(competence, batch_size);
        index::sample(rng, w, batch_size.min(w))
            .iter()
            .map(|r| self.order[r])
            .collect()
    }
}
