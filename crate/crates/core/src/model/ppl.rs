use ndarray::Array2;

use super::encoder::gather_rows;
use super::{log_softmax, Batch, Model, Task};
use crate::error::{Error, Result};
use crate::tokenizer::MASK_ID;

/// A model that scores each token of a sequence with that token masked out.
pub trait MaskedLm {
    /// `log p(ids[i] | ids with position i masked)` for every position.
    fn masked_log_probs(&self, ids: &[u32]) -> Result<Vec<f64>>;
}

impl MaskedLm for Model {
    fn masked_log_probs(&self, ids: &[u32]) -> Result<Vec<f64>> {
        let n = ids.len();
        let head = self
            .head(Task::Mlm)
            .ok_or_else(|| Error::config("scoring needs an MLM head"))?;
        let masked = Array2::from_shape_fn((n, n), |(i, j)| if i == j { MASK_ID } else { ids[j] });
        let batch = Batch {
            ids: masked,
            attention: Array2::from_elem((n, n), true),
        };
        let hidden = self.hidden_states(&batch)?;
        let diagonal: Vec<usize> = (0..n).map(|i| i * n + i).collect();
        let logits = head.forward(gather_rows(hidden.view(), &diagonal).view());
        Ok(logits
            .rows()
            .into_iter()
            .zip(ids)
            .map(|(row, &id)| log_softmax(row.as_slice().expect("contiguous"))[id as usize])
            .collect())
    }
}

pub fn pseudo_log_likelihood<M: MaskedLm + ?Sized>(model: &M, ids: &[u32]) -> Result<f64> {
    if ids.is_empty() {
        return Err(Error::data("cannot score an empty instance"));
    }
    Ok(model.masked_log_probs(ids)?.iter().sum())
}

/// `exp(-PLL / length)`, masking each position exactly once.
pub fn pseudo_perplexity<M: MaskedLm + ?Sized>(model: &M, ids: &[u32]) -> Result<f64> {
    Ok((-pseudo_log_likelihood(model, ids)? / ids.len() as f64).exp())
}
