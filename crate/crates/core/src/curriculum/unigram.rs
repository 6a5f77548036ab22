use crate::error::{Error, Result};

/// Add-one smoothed unigram model over token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct UnigramModel {
    counts: Vec<u64>,
    total: u64,
}

impl UnigramModel {
    pub fn train(corpus: &[Vec<u32>], vocab_size: usize) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::config("unigram vocabulary must be non-empty"));
        }
        let mut counts = vec![0u64; vocab_size];
        let mut total = 0u64;
        for &id in corpus.iter().flatten() {
            *counts
                .get_mut(id as usize)
                .ok_or(Error::TokenOutOfRange { id, vocab_size })? += 1;
            total += 1;
        }
        if total == 0 {
            return Err(Error::data("cannot train a unigram model on an empty corpus"));
        }
        Ok(Self { counts, total })
    }

    pub fn vocab_size(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn prob(&self, id: u32) -> Result<f64> {
        let c = *self.counts.get(id as usize).ok_or(Error::TokenOutOfRange {
            id,
            vocab_size: self.counts.len(),
        })?;
        Ok((c + 1) as f64 / (self.total + self.counts.len() as u64) as f64)
    }

    /// `exp(-mean log p)` over the instance.
    pub fn perplexity(&self, ids: &[u32]) -> Result<f64> {
        if ids.is_empty() {
            return Err(Error::data("cannot score an empty instance"));
        }
        let mut ll = 0.0;
        for &id in ids {
            ll += self.prob(id)?.ln();
        }
        Ok((-ll / ids.len() as f64).exp())
    }
}
