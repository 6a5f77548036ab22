use ndarray::Array2;
use rand::Rng;

use super::loss::IGNORE_INDEX;
use super::Batch;
use crate::tokenizer::{is_special, MASK_ID, NUM_SPECIALS};

pub const DEFAULT_MASK_PROB: f64 = 0.15;

/// What happened to a position during MLM corruption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Corruption {
    #[default]
    None,
    Masked,
    Random,
    Kept,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub inputs: Array2<u32>,
    /// Original id at selected positions, [`IGNORE_INDEX`] elsewhere.
    pub targets: Array2<i32>,
    pub corruption: Array2<Corruption>,
}

impl MaskedBatch {
    pub fn num_targets(&self) -> usize {
        self.targets.iter().filter(|&&t| t != IGNORE_INDEX).count()
    }
}

/// Standard MLM corruption: each non-special, non-pad position is selected
/// with probability `mask_prob`; a selected position becomes `<mask>` 80% of
/// the time, a random non-special id 10%, and is left unchanged 10%.
pub fn mlm_mask<R: Rng>(batch: &Batch, mask_prob: f64, vocab_size: usize, rng: &mut R) -> MaskedBatch {
    let mut inputs = batch.ids.clone();
    let mut targets = Array2::from_elem(batch.ids.raw_dim(), IGNORE_INDEX);
    let mut corruption = Array2::from_elem(batch.ids.raw_dim(), Corruption::None);
    for ((idx, &id), &keep) in batch.ids.indexed_iter().zip(batch.attention.iter()) {
        if !keep || is_special(id) {
            continue;
        }
        if rng.random::<f64>() >= mask_prob {
            continue;
        }
        targets[idx] = id as i32;
        let r: f64 = rng.random();
        corruption[idx] = if r < 0.8 {
            inputs[idx] = MASK_ID;
            Corruption::Masked
        } else if r < 0.9 {
            inputs[idx] = rng.random_range(NUM_SPECIALS as u32..vocab_size as u32);
            Corruption::Random
        } else {
            Corruption::Kept
        };
    }
    MaskedBatch {
        inputs,
        targets,
        corruption,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_probability_selects_nothing() {
        let batch = Batch::from_sequences(&[vec![10, 11, 12], vec![13]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = mlm_mask(&batch, 0.0, 50, &mut rng);
        assert_eq!(m.num_targets(), 0);
        assert_eq!(m.inputs, batch.ids);
    }

    #[test]
    fn pads_and_specials_are_never_selected() {
        let batch = Batch::from_sequences(&[vec![10, 3, 12, 1], vec![13]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = mlm_mask(&batch, 0.999_999, 50, &mut rng);
        assert_eq!(m.targets[[0, 1]], IGNORE_INDEX);
        assert_eq!(m.targets[[0, 3]], IGNORE_INDEX);
        assert_eq!(m.targets[[1, 1]], IGNORE_INDEX);
        assert_eq!(m.targets[[0, 0]], 10);
        assert_eq!(m.targets[[1, 0]], 13);
    }
}
