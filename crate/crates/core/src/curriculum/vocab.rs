use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::IGNORE_INDEX;
use crate::tokenizer::{is_special, Tokenizer, NUM_SPECIALS, UNK_ID};
use crate::wordclass::{Tag, WordClassLexicon};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabStrategy {
    /// Ascending token id, which follows merge order and so frequency.
    TokenId,
    /// Whole word-class groups, lexical classes first.
    WordClass,
    /// Word-class order, unmasked one token at a time.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabConfig {
    pub strategy: VocabStrategy,
}

/// Order in which non-special ids are unmasked.
pub fn vocab_order(strategy: VocabStrategy, tok: &Tokenizer, lexicon: Option<&WordClassLexicon>) -> Result<Vec<u32>> {
    let tags = match (strategy, lexicon) {
        (VocabStrategy::TokenId, _) => None,
        (_, Some(lex)) => Some(lex.id_tags(tok)),
        (_, None) => {
            return Err(Error::config(format!(
                "vocabulary strategy {strategy:?} needs a word-class lexicon"
            )))
        }
    };
    order_from_tags(strategy, tok.vocab_size(), tags.as_deref())
}

fn order_from_tags(strategy: VocabStrategy, vocab_size: usize, tags: Option<&[Tag]>) -> Result<Vec<u32>> {
    let mut ids: Vec<u32> = (NUM_SPECIALS as u32..vocab_size as u32).collect();
    if strategy != VocabStrategy::TokenId {
        let tags = tags.ok_or_else(|| Error::config("word-class ordering needs a tag per id"))?;
        if tags.len() != vocab_size {
            return Err(Error::config(format!(
                "tag table covers {} ids, vocabulary has {vocab_size}",
                tags.len()
            )));
        }
        ids.sort_by_key(|&id| (tags[id as usize], id));
    }
    Ok(ids)
}

/// Which ids the model may currently see.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabularyCurriculum {
    strategy: VocabStrategy,
    order: Vec<u32>,
    /// For each position in `order`, one past the last position of its tag
    /// group; used for group-atomic unmasking.
    group_end: Vec<usize>,
    allowed: Vec<bool>,
    allowed_count: usize,
}

impl VocabularyCurriculum {
    pub fn new(strategy: VocabStrategy, tok: &Tokenizer, lexicon: Option<&WordClassLexicon>) -> Result<Self> {
        let tags = lexicon.map(|l| l.id_tags(tok));
        Self::from_tags(strategy, tok.vocab_size(), tags)
    }

    pub fn from_tags(strategy: VocabStrategy, vocab_size: usize, tags: Option<Vec<Tag>>) -> Result<Self> {
        let order = order_from_tags(strategy, vocab_size, tags.as_deref())?;
        let mut group_end: Vec<usize> = (1..=order.len()).collect();
        if let (VocabStrategy::WordClass, Some(tags)) = (strategy, &tags) {
            let mut end = order.len();
            for i in (0..order.len()).rev() {
                if i + 1 < order.len() && tags[order[i] as usize] != tags[order[i + 1] as usize] {
                    end = i + 1;
                }
                group_end[i] = end;
            }
        }
        let mut allowed = vec![false; vocab_size];
        allowed[..NUM_SPECIALS.min(vocab_size)].fill(true);
        Ok(Self {
            strategy,
            order,
            group_end,
            allowed,
            allowed_count: 0,
        })
    }

    pub fn strategy(&self) -> VocabStrategy {
        self.strategy
    }

    pub fn order(&self) -> &[u32] {
        &self.order
    }

    /// Number of non-special ids unmasked at pacing value `p`.
    pub fn prefix_len(&self, p: f64) -> usize {
        let v = self.order.len();
        let n = ((p * v as f64) - 1e-9).ceil().clamp(0.0, v as f64) as usize;
        if n == 0 {
            0
        } else {
            self.group_end[n - 1]
        }
    }

    /// Grows the allowed set to match pacing value `p`. The set never
    /// shrinks.
    pub fn update(&mut self, p: f64) {
        let n = self.prefix_len(p);
        for &id in &self.order[self.allowed_count.min(n)..n] {
            self.allowed[id as usize] = true;
        }
        self.allowed_count = self.allowed_count.max(n);
    }

    /// Non-special ids currently allowed.
    pub fn allowed_count(&self) -> usize {
        self.allowed_count
    }

    pub fn is_allowed(&self, id: u32) -> bool {
        is_special(id) || self.allowed.get(id as usize).copied().unwrap_or(false)
    }

    /// Maps disallowed inputs to `<unk>` and drops MLM targets whose true
    /// token is disallowed.
    pub fn apply(&self, inputs: &mut Array2<u32>, mlm_targets: Option<&mut Array2<i32>>) {
        inputs.mapv_inplace(|id| if self.is_allowed(id) { id } else { UNK_ID });
        if let Some(t) = mlm_targets {
            t.mapv_inplace(|c| {
                if c != IGNORE_INDEX && !self.is_allowed(c as u32) {
                    IGNORE_INDEX
                } else {
                    c
                }
            });
        }
    }
}
