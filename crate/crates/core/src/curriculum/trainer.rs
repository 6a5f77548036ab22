//! One training step: sample, corrupt, gate the vocabulary, then apply each
//! active task's optimizer in turn.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{CurriculumEvent, DataCurriculum};
use super::pacing::pacing_value;
use super::vocab::VocabularyCurriculum;
use super::CurriculumConfig;
use crate::error::{Error, Result};
use crate::model::{lr_at, mlm_mask, AdamState, Batch, Checkpoint, Model, OptimizerConfig, Task, IGNORE_INDEX};
use crate::wordclass::Tag;

const TRAIN_STREAM: u64 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Already scaled by the run's step scale.
    pub optimizer: OptimizerConfig,
    /// Already scaled by the run's step scale.
    pub curriculum: CurriculumConfig,
    pub mask_prob: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub pacing: f64,
    pub losses: Vec<(Task, f64)>,
    /// Active tasks that had no target positions this step.
    pub skipped: Vec<Task>,
    /// Item indices drawn from the pool.
    pub sampled: Vec<usize>,
    /// Input ids as the model saw them.
    pub inputs: Array2<u32>,
    pub allowed: Option<usize>,
    pub event: Option<CurriculumEvent>,
}

#[derive(Serialize, Deserialize)]
struct RunState {
    step: u64,
    seed: u64,
    rng_word_pos: String,
    rescores: u64,
}

const DIFFICULTY_TENSOR: &str = "state.difficulty";

/// Word-class targets for selected positions; `truth` holds the original
/// id at selected positions and [`IGNORE_INDEX`] elsewhere.
pub fn pos_targets(truth: &Array2<i32>, tags: &[Tag], task: Task) -> Array2<i32> {
    truth.mapv(|t| {
        if t == IGNORE_INDEX {
            return IGNORE_INDEX;
        }
        let tag = tags.get(t as usize).copied().unwrap_or(Tag::Other);
        match task {
            Task::Pos3 => tag.pos3_class() as i32,
            Task::Pos10 => tag.pos10_class().map_or(IGNORE_INDEX, |c| c as i32),
            Task::Mlm => t,
        }
    })
}

pub struct Trainer {
    model: Model,
    optimizers: BTreeMap<Task, AdamState>,
    cfg: TrainConfig,
    data: DataCurriculum,
    vocab: Option<VocabularyCurriculum>,
    tags: Option<Vec<Tag>>,
    rng: ChaCha8Rng,
    step: u64,
}

impl Trainer {
    pub fn new(
        model: Model,
        cfg: TrainConfig,
        data: DataCurriculum,
        vocab: Option<VocabularyCurriculum>,
        tags: Option<Vec<Tag>>,
    ) -> Result<Self> {
        cfg.optimizer.validate()?;
        cfg.curriculum.validate()?;
        if !(cfg.mask_prob > 0.0 && cfg.mask_prob < 1.0) {
            return Err(Error::config(format!("mask_prob {} must lie in (0, 1)", cfg.mask_prob)));
        }
        let tasks = cfg.curriculum.objective.tasks();
        for &t in &tasks {
            if model.head(t).is_none() {
                return Err(Error::config(format!("model lacks a head for scheduled task {t}")));
            }
        }
        if tasks.iter().any(|&t| t != Task::Mlm) && tags.is_none() {
            return Err(Error::config("word-class tasks need a word-class lexicon"));
        }
        if let Some(t) = &tags {
            if t.len() != model.config().vocab_size {
                return Err(Error::config("tag table and model vocabulary differ in size"));
            }
        }
        let optimizers = tasks.iter().map(|&t| (t, model.optimizer_for(t))).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Self {
            model,
            optimizers,
            cfg,
            data,
            vocab,
            tags,
            rng,
            step: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn data(&self) -> &DataCurriculum {
        &self.data
    }

    pub fn vocab(&self) -> Option<&VocabularyCurriculum> {
        self.vocab.as_ref()
    }

    pub fn optimizer(&self, task: Task) -> Option<&AdamState> {
        self.optimizers.get(&task)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Steps completed so far.
    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn max_steps(&self) -> u64 {
        self.cfg.optimizer.max_steps
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.max_steps()
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let s = self.step + 1;
        let max = self.max_steps();
        let opt = self.cfg.optimizer;
        let p = pacing_value(&self.cfg.curriculum.pacing, s, max);
        if let Some(v) = &mut self.vocab {
            v.update(p);
        }
        let competence = if self.data.config().is_some() { p } else { 1.0 };
        let sampled = self.data.competence_sample(competence, opt.batch_size, &mut self.rng);
        let seqs: Vec<Vec<u32>> = sampled.iter().map(|&i| self.data.items()[i].tokens.clone()).collect();
        let batch = Batch::from_sequences(&seqs);
        let vocab_size = self.model.config().vocab_size;
        let mut masked = mlm_mask(&batch, self.cfg.mask_prob, vocab_size, &mut self.rng);
        let truth = masked.targets.clone();
        if let Some(v) = &self.vocab {
            v.apply(&mut masked.inputs, Some(&mut masked.targets));
        }
        let inputs = batch.with_ids(masked.inputs);

        let mut losses = Vec::new();
        let mut skipped = Vec::new();
        for task in self.cfg.curriculum.objective.active_tasks(s, max) {
            let targets = match task {
                Task::Mlm => masked.targets.clone(),
                _ => pos_targets(&truth, self.tags.as_deref().expect("checked at construction"), task),
            };
            let state = self.optimizers.get_mut(&task).expect("optimizer per scheduled task");
            match self.model.train_step(task, &inputs, &targets, state, &opt, s) {
                Ok(loss) => losses.push((task, loss)),
                Err(Error::EmptyLoss) => {
                    log::debug!("step {s}: no {task} targets, skipped");
                    skipped.push(task);
                }
                Err(e) => return Err(e),
            }
        }
        self.step = s;
        let event = self.data.maybe_rescore(&self.model, s)?;
        Ok(StepReport {
            step: s,
            lr: lr_at(s, &opt),
            pacing: p,
            losses,
            skipped,
            sampled,
            inputs: inputs.ids,
            allowed: self.vocab.as_ref().map(VocabularyCurriculum::allowed_count),
            event,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let state = RunState {
            step: self.step,
            seed: self.cfg.seed,
            rng_word_pos: self.rng.get_word_pos().to_string(),
            rescores: self.data.rescores(),
        };
        let mut ck = Checkpoint::new(&self.model, serde_json::to_value(state)?).with_optimizers(&self.optimizers);
        ck.tensors
            .insert(DIFFICULTY_TENSOR.to_string(), self.data.difficulties().to_vec());
        Ok(ck)
    }

    /// Continues from `ck` so that further steps match an uninterrupted run.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.config != *self.model.config() {
            return Err(Error::Checkpoint(
                "checkpoint model config differs from the run config".into(),
            ));
        }
        let state: RunState =
            serde_json::from_value(ck.meta.clone()).map_err(|e| Error::Checkpoint(format!("run state: {e}")))?;
        if state.seed != self.cfg.seed {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained with seed {}, run uses {}",
                state.seed, self.cfg.seed
            )));
        }
        let word_pos: u128 = state
            .rng_word_pos
            .parse()
            .map_err(|_| Error::Checkpoint("bad RNG position".into()))?;
        let difficulty = ck
            .tensors
            .get(DIFFICULTY_TENSOR)
            .cloned()
            .ok_or_else(|| Error::Checkpoint("missing pool difficulties".into()))?;
        let model = ck.model()?;
        if ck.optimizers.keys().ne(self.optimizers.keys()) {
            return Err(Error::Checkpoint(
                "checkpoint optimizers do not match the schedule".into(),
            ));
        }
        self.data.restore(difficulty, state.rescores)?;
        self.model = model;
        self.optimizers = ck.optimizers.clone();
        self.rng.set_word_pos(word_pos);
        self.step = state.step;
        let p = pacing_value(&self.cfg.curriculum.pacing, self.step, self.max_steps());
        if let Some(v) = &mut self.vocab {
            v.update(p);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pos3_targets_follow_word_class() {
        let mut tags = vec![Tag::Other; 10];
        tags[5] = Tag::Noun;
        tags[6] = Tag::Adj;
        tags[7] = Tag::Verb;
        let truth = Array2::from_shape_vec((1, 4), vec![5, 6, IGNORE_INDEX, 7]).unwrap();
        let t3 = pos_targets(&truth, &tags, Task::Pos3);
        assert_eq!(t3.as_slice().unwrap(), &[0, 2, IGNORE_INDEX, 1]);
        let t10 = pos_targets(&truth, &tags, Task::Pos10);
        assert_eq!(t10.as_slice().unwrap(), &[0, 2, IGNORE_INDEX, 1]);
    }

    #[test]
    fn other_is_ignored_for_pos10() {
        let tags = vec![Tag::Other; 10];
        let truth = Array2::from_shape_vec((1, 1), vec![8]).unwrap();
        assert_eq!(pos_targets(&truth, &tags, Task::Pos10)[[0, 0]], IGNORE_INDEX);
        assert_eq!(pos_targets(&truth, &tags, Task::Pos3)[[0, 0]], 2);
    }
}
