//! Vocabulary, data and objective curricula and the training step that
//! combines them.

mod data;
mod objective;
mod pacing;
mod trainer;
mod unigram;
mod vocab;

use serde::{Deserialize, Serialize};

pub use data::{CurriculumEvent, DataConfig, DataCurriculum, DataInit, DataMode, PoolItem};
pub use objective::{ObjectiveEntry, ObjectiveMode, ObjectiveSchedule};
pub use pacing::{pacing_value, ramp, PacingConfig, PacingKind};
pub use trainer::{pos_targets, StepReport, TrainConfig, Trainer};
pub use unigram::UnigramModel;
pub use vocab::{vocab_order, VocabConfig, VocabStrategy, VocabularyCurriculum};

use crate::error::Result;

/// Curriculum block of the run configuration. Every part is optional; an
/// empty block is a vanilla MLM run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumConfig {
    #[serde(default)]
    pub pacing: PacingConfig,
    #[serde(default)]
    pub vocabulary: Option<VocabConfig>,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub objective: ObjectiveSchedule,
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        self.pacing.validate()?;
        if let Some(d) = &self.data {
            d.validate()?;
        }
        self.objective.validate()
    }

    pub fn scaled(&self, step_scale: f64) -> Self {
        Self {
            data: self.data.map(|d| d.scaled(step_scale)),
            ..self.clone()
        }
    }

    pub fn needs_lexicon(&self) -> bool {
        self.vocabulary.is_some_and(|v| v.strategy != VocabStrategy::TokenId)
            || self.objective.tasks().iter().any(|&t| t != crate::model::Task::Mlm)
    }
}
