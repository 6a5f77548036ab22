//! Synthetic corpora drawn from a known HMM with disjoint emission
//! supports, used to check the inducer against the generating partition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tokenizer::NUM_SPECIALS;

#[derive(Debug, Clone)]
pub struct SeparableHmm {
    /// Row-stochastic state transition matrix.
    pub transitions: Vec<Vec<f64>>,
    pub words_per_state: usize,
    pub num_sequences: usize,
    pub seq_len: usize,
}

/// Generated sequences with the gold state of every token.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub sequences: Vec<Vec<u32>>,
    pub states: Vec<Vec<usize>>,
}

impl Default for SeparableHmm {
    /// Three states with a strong DET -> NOUN -> VERB cycle.
    fn default() -> Self {
        Self {
            transitions: vec![vec![0.05, 0.90, 0.05], vec![0.10, 0.10, 0.80], vec![0.80, 0.10, 0.10]],
            words_per_state: 6,
            num_sequences: 300,
            seq_len: 12,
        }
    }
}

impl SeparableHmm {
    pub fn num_states(&self) -> usize {
        self.transitions.len()
    }

    /// Token id of word `j` emitted by `state`; ids start after the specials.
    pub fn token(&self, state: usize, j: usize) -> u32 {
        (NUM_SPECIALS + state * self.words_per_state + j) as u32
    }

    pub fn state_of(&self, token: u32) -> usize {
        (token as usize - NUM_SPECIALS) / self.words_per_state
    }

    pub fn generate(&self, seed: u64) -> SyntheticCorpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.num_states();
        let mut sequences = Vec::with_capacity(self.num_sequences);
        let mut states = Vec::with_capacity(self.num_sequences);
        for _ in 0..self.num_sequences {
            let mut state = rng.random_range(0..k);
            let mut seq = Vec::with_capacity(self.seq_len);
            let mut gold = Vec::with_capacity(self.seq_len);
            for _ in 0..self.seq_len {
                seq.push(self.token(state, rng.random_range(0..self.words_per_state)));
                gold.push(state);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let row = &self.transitions[state];
                state = row.len() - 1;
                for (next, p) in row.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        state = next;
                        break;
                    }
                }
            }
            sequences.push(seq);
            states.push(gold);
        }
        SyntheticCorpus { sequences, states }
    }
}
