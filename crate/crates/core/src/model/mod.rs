//! Pre-LN transformer encoder with per-task linear heads.

mod checkpoint;
mod encoder;
mod gradcheck;
mod layers;
mod loss;
mod masking;
mod optim;
mod ppl;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use encoder::{Block, Encoder};
pub use gradcheck::{
    grad_check, GradCheckReport, GradObjective, LinearProbe, ModelObjective, MIN_COORDINATES, RELATIVE_FLOOR,
};
pub use layers::{gelu, LayerNorm, Linear, Parameters};
pub use loss::{cross_entropy, log_softmax, softmax, task_loss, IGNORE_INDEX};
pub use masking::{mlm_mask, Corruption, MaskedBatch, DEFAULT_MASK_PROB};
pub use optim::{decays, lr_at, scale_steps, AdamState, OptimizerConfig};
pub use ppl::{pseudo_log_likelihood, pseudo_perplexity, MaskedLm};

use crate::error::{Error, Result};
use crate::tokenizer::PAD_ID;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    #[serde(default)]
    pub tie_word_embeddings: bool,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_eps() -> f64 {
    1e-5
}

fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    /// 8 layers, 8 heads, 256 hidden, 2048 intermediate, 8192 vocabulary.
    pub fn small() -> Self {
        Self {
            layers: 8,
            heads: 8,
            hidden: 256,
            intermediate: 2048,
            vocab_size: 8192,
            max_len: 128,
            layer_norm_eps: default_eps(),
            tie_word_embeddings: false,
            init_std: default_init_std(),
        }
    }

    /// 2 layers, 2 heads, 64 hidden, 256 intermediate, 512 vocabulary.
    pub fn desk() -> Self {
        Self {
            layers: 2,
            heads: 2,
            hidden: 64,
            intermediate: 256,
            vocab_size: 512,
            ..Self::small()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.intermediate == 0 || self.max_len == 0 {
            return Err(Error::config("intermediate and max_len must be positive"));
        }
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size must be at least 2"));
        }
        if !(self.layer_norm_eps > 0.0) || !(self.init_std > 0.0) {
            return Err(Error::config("layer_norm_eps and init_std must be positive"));
        }
        if self.tie_word_embeddings {
            return Err(Error::config("tied word embeddings are not supported"));
        }
        Ok(())
    }
}

/// Training objectives, ordered as they are applied within one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "POS3")]
    Pos3,
    #[serde(rename = "POS10")]
    Pos10,
    #[serde(rename = "MLM")]
    Mlm,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Pos3, Task::Pos10, Task::Mlm];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Pos3 => "POS3",
            Task::Pos10 => "POS10",
            Task::Mlm => "MLM",
        }
    }

    pub fn num_classes(self, vocab_size: usize) -> usize {
        match self {
            Task::Pos3 => 3,
            Task::Pos10 => 10,
            Task::Mlm => vocab_size,
        }
    }

    fn stream(self) -> u64 {
        match self {
            Task::Pos3 => 1,
            Task::Pos10 => 2,
            Task::Mlm => 3,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "POS3" => Ok(Task::Pos3),
            "POS10" => Ok(Task::Pos10),
            "MLM" => Ok(Task::Mlm),
            other => Err(Error::config(format!("unknown task {other:?}"))),
        }
    }
}

/// Padded id matrix with a keep-mask (`true` for real tokens).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Array2<u32>,
    pub attention: Array2<bool>,
}

impl Batch {
    pub fn new(ids: Array2<u32>, attention: Array2<bool>) -> Result<Self> {
        if ids.dim() != attention.dim() {
            return Err(Error::data("id and attention matrices differ in shape"));
        }
        Ok(Self { ids, attention })
    }

    /// Right-pads `seqs` with `<pad>` to the longest length.
    pub fn from_sequences(seqs: &[Vec<u32>]) -> Self {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Array2::from_elem((seqs.len(), len), PAD_ID);
        let mut attention = Array2::from_elem((seqs.len(), len), false);
        for (i, s) in seqs.iter().enumerate() {
            for (j, &t) in s.iter().enumerate() {
                ids[[i, j]] = t;
                attention[[i, j]] = true;
            }
        }
        Self { ids, attention }
    }

    pub fn with_ids(&self, ids: Array2<u32>) -> Self {
        Self {
            ids,
            attention: self.attention.clone(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.ids.nrows()
    }

    pub fn seq_len(&self) -> usize {
        self.ids.ncols()
    }
}

/// Gradients of one task's loss with respect to the encoder and that
/// task's head.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub task: Task,
    pub encoder: Encoder,
    pub head: Linear,
}

impl Gradients {
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut v = self.encoder.tensors();
        v.extend(layers::prefixed(&head_prefix(self.task), self.head.tensors()));
        v
    }
}

fn head_prefix(task: Task) -> String {
    format!("heads.{task}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub encoder: Encoder,
    heads: BTreeMap<Task, Linear>,
}

impl Model {
    /// Seeded initialization. The encoder and each head draw from separate
    /// streams, so the head set does not perturb the encoder.
    pub fn new(config: ModelConfig, tasks: &[Task], seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let encoder = Encoder::new(&config, &mut rng);
        let mut heads = BTreeMap::new();
        for &task in tasks {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(task.stream());
            let k = task.num_classes(config.vocab_size);
            heads.insert(task, Linear::new(config.hidden, k, config.init_std, &mut rng));
        }
        if heads.is_empty() {
            return Err(Error::config("a model needs at least one task head"));
        }
        Ok(Self { config, encoder, heads })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tasks(&self) -> impl Iterator<Item = Task> + '_ {
        self.heads.keys().copied()
    }

    pub fn head(&self, task: Task) -> Option<&Linear> {
        self.heads.get(&task)
    }

    fn head_or_err(&self, task: Task) -> Result<&Linear> {
        self.heads
            .get(&task)
            .ok_or_else(|| Error::config(format!("model has no {task} head")))
    }

    pub fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.ids.dim() != batch.attention.dim() {
            return Err(Error::data("id and attention matrices differ in shape"));
        }
        if batch.seq_len() > self.config.max_len {
            return Err(Error::data(format!(
                "sequence length {} exceeds max_len {}",
                batch.seq_len(),
                self.config.max_len
            )));
        }
        if let Some(&id) = batch.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Final hidden states shaped `(batch * seq, hidden)`.
    pub fn hidden_states(&self, batch: &Batch) -> Result<Array2<f64>> {
        self.check_batch(batch)?;
        Ok(self.encoder.forward(batch).0)
    }

    /// Logits shaped `(batch, seq, classes)` for each requested head.
    pub fn forward(&self, batch: &Batch, tasks: &[Task]) -> Result<BTreeMap<Task, Array3<f64>>> {
        let heads = tasks
            .iter()
            .map(|&t| self.head_or_err(t).map(|h| (t, h)))
            .collect::<Result<Vec<_>>>()?;
        let hidden = self.hidden_states(batch)?;
        let (b, t) = batch.ids.dim();
        heads
            .into_iter()
            .map(|(task, head)| {
                let logits = head.forward(hidden.view());
                let k = logits.ncols();
                let logits = logits.into_shape_with_order((b, t, k)).expect("row-major logits");
                Ok((task, logits))
            })
            .collect()
    }

    /// Flattened row indices and classes of positions that carry loss.
    fn target_rows(&self, batch: &Batch, targets: &Array2<i32>, k: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        if targets.dim() != batch.ids.dim() {
            return Err(Error::data("target matrix shape differs from the batch"));
        }
        let mut rows = Vec::new();
        let mut classes = Vec::new();
        for (n, (&t, &keep)) in targets.iter().zip(batch.attention.iter()).enumerate() {
            if t == IGNORE_INDEX || !keep {
                continue;
            }
            if t < 0 || t as usize >= k {
                return Err(Error::data(format!("target class {t} outside 0..{k}")));
            }
            rows.push(n);
            classes.push(t as usize);
        }
        if rows.is_empty() {
            return Err(Error::EmptyLoss);
        }
        Ok((rows, classes))
    }

    /// Mean cross-entropy of `task` over non-ignored, non-pad positions.
    pub fn loss(&self, batch: &Batch, targets: &Array2<i32>, task: Task) -> Result<f64> {
        let head = self.head_or_err(task)?;
        let (rows, classes) = self.target_rows(batch, targets, head.b.len())?;
        let hidden = self.hidden_states(batch)?;
        let selected = encoder::gather_rows(hidden.view(), &rows);
        Ok(cross_entropy(&head.forward(selected.view()), &classes).0)
    }

    pub fn loss_and_grads(&self, batch: &Batch, targets: &Array2<i32>, task: Task) -> Result<(f64, Gradients)> {
        let head = self.head_or_err(task)?;
        let (rows, classes) = self.target_rows(batch, targets, head.b.len())?;
        self.check_batch(batch)?;
        let (hidden, cache) = self.encoder.forward(batch);
        let selected = encoder::gather_rows(hidden.view(), &rows);
        let (loss, dlogits) = cross_entropy(&head.forward(selected.view()), &classes);
        let mut grads = Gradients {
            task,
            encoder: self.encoder.zeros_like(),
            head: head.zeros_like(),
        };
        let dselected = head.backward(selected.view(), &dlogits, &mut grads.head);
        let mut dhidden = Array2::zeros(hidden.raw_dim());
        for (src, &r) in dselected.rows().into_iter().zip(&rows) {
            dhidden.row_mut(r).assign(&src);
        }
        self.encoder.backward(&dhidden, &cache, &mut grads.encoder);
        Ok((loss, grads))
    }

    /// Encoder tensors followed by the task head's tensors.
    pub fn task_tensors(&self, task: Task) -> Vec<(String, &[f64])> {
        let mut v = self.encoder.tensors();
        if let Some(h) = self.heads.get(&task) {
            v.extend(layers::prefixed(&head_prefix(task), h.tensors()));
        }
        v
    }

    pub fn task_tensors_mut(&mut self, task: Task) -> Vec<(String, &mut [f64])> {
        let mut v = self.encoder.tensors_mut();
        if let Some(h) = self.heads.get_mut(&task) {
            v.extend(layers::prefixed(&head_prefix(task), h.tensors_mut()));
        }
        v
    }

    /// Fresh optimizer state covering the encoder and one head.
    pub fn optimizer_for(&self, task: Task) -> AdamState {
        AdamState::new(self.task_tensors(task).iter().map(|(_, t)| t.len()))
    }

    pub fn apply_gradients(&mut self, grads: &Gradients, state: &mut AdamState, cfg: &OptimizerConfig, lr: f64) {
        let g = grads.tensors();
        state.update(cfg, lr, self.task_tensors_mut(grads.task), &g);
    }

    /// Computes the task loss, aborts on a non-finite value, and applies one
    /// optimizer step to the encoder and that head.
    pub fn train_step(
        &mut self,
        task: Task,
        batch: &Batch,
        targets: &Array2<i32>,
        state: &mut AdamState,
        cfg: &OptimizerConfig,
        step: u64,
    ) -> Result<f64> {
        let (loss, grads) = self.loss_and_grads(batch, targets, task)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                task: task.to_string(),
                step,
                loss,
            });
        }
        self.apply_gradients(&grads, state, cfg, lr_at(step, cfg));
        Ok(loss)
    }

    /// Hex SHA-256 over tensor names and little-endian values.
    pub fn digest_of<'a>(tensors: impl IntoIterator<Item = (String, &'a [f64])>) -> String {
        let mut h = Sha256::new();
        for (name, t) in tensors {
            h.update(name.as_bytes());
            h.update((t.len() as u64).to_le_bytes());
            for v in t {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn head_digest(&self, task: Task) -> Option<String> {
        self.heads.get(&task).map(|h| Self::digest_of(h.tensors()))
    }

    pub fn digest(&self) -> String {
        Self::digest_of(self.tensors())
    }

    /// Rebuilds a model from named tensors; the head set is read from the
    /// tensor names.
    pub fn from_tensors(config: ModelConfig, tensors: &BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let tasks: Vec<Task> = Task::ALL
            .into_iter()
            .filter(|t| tensors.contains_key(&format!("{}.w", head_prefix(*t))))
            .collect();
        let mut model = Self::new(config, &tasks, 0)?;
        let mut seen = 0usize;
        for (name, dst) in model.tensors_mut() {
            let src = tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if src.len() != dst.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has {} values, expected {}",
                    src.len(),
                    dst.len()
                )));
            }
            dst.copy_from_slice(src);
            seen += 1;
        }
        let model_tensors = tensors.keys().filter(|k| !k.starts_with("state.")).count();
        if seen != model_tensors {
            return Err(Error::Checkpoint("checkpoint holds unexpected model tensors".into()));
        }
        Ok(model)
    }
}

impl Parameters for Model {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut v = self.encoder.tensors();
        for (task, h) in &self.heads {
            v.extend(layers::prefixed(&head_prefix(*task), h.tensors()));
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut v = self.encoder.tensors_mut();
        for (task, h) in self.heads.iter_mut() {
            v.extend(layers::prefixed(&head_prefix(*task), h.tensors_mut()));
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 2,
            hidden: 8,
            intermediate: 16,
            vocab_size: 20,
            max_len: 6,
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn indivisible_heads_rejected() {
        let cfg = ModelConfig {
            hidden: 250,
            heads: 8,
            ..ModelConfig::small()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn tied_embeddings_rejected() {
        let cfg = ModelConfig {
            tie_word_embeddings: true,
            ..ModelConfig::desk()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn logit_shapes() {
        let m = Model::new(tiny(), &Task::ALL, 1).unwrap();
        let batch = Batch::from_sequences(&[vec![7]]);
        let out = m.forward(&batch, &Task::ALL).unwrap();
        assert_eq!(out[&Task::Mlm].dim(), (1, 1, 20));
        assert_eq!(out[&Task::Pos10].dim(), (1, 1, 10));
        assert_eq!(out[&Task::Pos3].dim(), (1, 1, 3));
    }

    #[test]
    fn out_of_range_id() {
        let m = Model::new(tiny(), &[Task::Mlm], 1).unwrap();
        let batch = Batch::from_sequences(&[vec![7, 20]]);
        assert!(matches!(
            m.forward(&batch, &[Task::Mlm]),
            Err(Error::TokenOutOfRange { id: 20, vocab_size: 20 })
        ));
    }

    #[test]
    fn init_is_deterministic_and_heads_are_independent() {
        let a = Model::new(tiny(), &[Task::Mlm], 9).unwrap();
        let b = Model::new(tiny(), &Task::ALL, 9).unwrap();
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.head(Task::Mlm), b.head(Task::Mlm));
        let c = Model::new(tiny(), &[Task::Mlm], 10).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn padded_positions_do_not_change_loss() {
        let m = Model::new(tiny(), &[Task::Mlm], 3).unwrap();
        let short = Batch::from_sequences(&[vec![5, 6, 7]]);
        let t_short = Array2::from_shape_vec((1, 3), vec![5, IGNORE_INDEX, 7]).unwrap();
        let padded = Batch::from_sequences(&[vec![5, 6, 7], vec![]]);
        let mut t_padded = Array2::from_elem((2, 3), 9);
        t_padded.row_mut(0).assign(&t_short.row(0));
        let a = m.loss(&short, &t_short, Task::Mlm).unwrap();
        let b = m.loss(&padded, &t_padded, Task::Mlm).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn initial_loss_is_near_ln_k() {
        let m = Model::new(ModelConfig::desk(), &Task::ALL, 4).unwrap();
        let seqs: Vec<Vec<u32>> = (0..4)
            .map(|i| (0..10).map(|j| 5 + (i * 37 + j * 11) % 500).collect())
            .collect();
        let batch = Batch::from_sequences(&seqs);
        for task in Task::ALL {
            let k = task.num_classes(512);
            let targets = Array2::from_shape_fn((4, 10), |(i, j)| ((i * 7 + j) % k) as i32);
            let loss = m.loss(&batch, &targets, task).unwrap();
            let rel = (loss - (k as f64).ln()).abs() / (k as f64).ln();
            assert!(rel < 0.05, "{task}: {loss}");
        }
    }

    #[test]
    fn task_round_trips_through_strings() {
        for t in Task::ALL {
            assert_eq!(t.as_str().parse::<Task>().unwrap(), t);
        }
        assert!(Task::Pos3 < Task::Pos10 && Task::Pos10 < Task::Mlm);
    }
}
