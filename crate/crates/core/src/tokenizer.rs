//! Byte-pair-encoding tokenizer.
//!
//! Words are split on whitespace and prefixed with a separate boundary
//! symbol (`▁`), so `"ab ab"` starts out as `▁ a b ▁ a b`. Ids are laid out
//! as: the five specials (0..=4), then every merged token in the order it was
//! learned, then the single-character alphabet by descending corpus
//! frequency. A lower id therefore means an earlier (more frequent) merge,
//! which is what the vocabulary curriculum keys on.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOUNDARY: &str = "▁";
pub const DEFAULT_VOCAB_SIZE: usize = 8192;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const CLS_ID: u32 = 4;
pub const NUM_SPECIALS: usize = 5;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "<mask>", "<sep>", "<cls>"];

pub fn is_special(id: u32) -> bool {
    (id as usize) < NUM_SPECIALS
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    merges: Vec<(String, String)>,
    tokens: Vec<String>,
    vocab: HashMap<String, u32>,
    merge_ranks: HashMap<(u32, u32), (usize, u32)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenizerFile {
    specials: Vec<String>,
    boundary: String,
    merges: Vec<(String, String)>,
    vocab: BTreeMap<String, u32>,
}

fn word_symbols(word: &str) -> impl Iterator<Item = String> + '_ {
    std::iter::once(BOUNDARY.to_owned()).chain(word.chars().map(String::from))
}

impl Tokenizer {
    /// Trains a BPE model on cleaned texts.
    ///
    /// Training stops at `vocab_size` entries or when no adjacent pair is
    /// left to merge, whichever comes first, so small corpora can yield a
    /// smaller vocabulary than requested.
    pub fn train<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Self> {
        let mut word_freq: HashMap<&str, u64> = HashMap::new();
        for text in corpus {
            for w in text.as_ref().split_whitespace() {
                *word_freq.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(&str, u64)> = word_freq.into_iter().collect();
        words.sort_unstable();

        let mut char_freq: HashMap<String, u64> = HashMap::new();
        for &(w, f) in &words {
            for s in word_symbols(w) {
                *char_freq.entry(s).or_default() += f;
            }
        }
        let alphabet_len = char_freq.len().max(1);
        if vocab_size <= alphabet_len + NUM_SPECIALS {
            return Err(Error::config(format!(
                "vocab_size {vocab_size} must exceed alphabet ({alphabet_len}) + specials ({NUM_SPECIALS})"
            )));
        }

        // symbol interning
        let mut sym_str: Vec<String> = Vec::new();
        let mut sym_id: HashMap<String, u32> = HashMap::new();
        let mut intern = |s: String, sym_str: &mut Vec<String>| -> u32 {
            *sym_id.entry(s.clone()).or_insert_with(|| {
                sym_str.push(s);
                (sym_str.len() - 1) as u32
            })
        };
        let mut seqs: Vec<Vec<u32>> = words
            .iter()
            .map(|(w, _)| word_symbols(w).map(|s| intern(s, &mut sym_str)).collect())
            .collect();
        let freqs: Vec<i64> = words.iter().map(|&(_, f)| f as i64).collect();

        let mut pair_count: HashMap<(u32, u32), i64> = HashMap::new();
        let mut pair_words: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
        for (wi, seq) in seqs.iter().enumerate() {
            for p in seq.windows(2) {
                let key = (p[0], p[1]);
                *pair_count.entry(key).or_default() += freqs[wi];
                pair_words.entry(key).or_default().insert(wi);
            }
        }
        type HeapEntry = (i64, Reverse<(String, String)>, (u32, u32));
        let mut heap: BinaryHeap<HeapEntry> = pair_count
            .iter()
            .filter(|(_, &c)| c > 0)
            .map(|(&k, &c)| {
                (
                    c,
                    Reverse((sym_str[k.0 as usize].clone(), sym_str[k.1 as usize].clone())),
                    k,
                )
            })
            .collect();

        let mut merges: Vec<(String, String)> = Vec::new();
        let mut merged_tokens: Vec<String> = Vec::new();
        let mut seen_tokens: HashSet<String> = HashSet::new();
        let target = vocab_size - NUM_SPECIALS - alphabet_len;

        while merged_tokens.len() < target {
            let Some((count, Reverse((ls, rs)), key)) = heap.pop() else {
                break;
            };
            if pair_count.get(&key).copied().unwrap_or(0) != count || count <= 0 {
                continue;
            }
            let new_str = format!("{ls}{rs}");
            let new_sym = intern(new_str.clone(), &mut sym_str);
            merges.push((ls, rs));
            if seen_tokens.insert(new_str.clone()) {
                merged_tokens.push(new_str);
            }

            let mut affected: Vec<usize> = pair_words
                .remove(&key)
                .map(|s| s.into_iter().collect())
                .unwrap_or_default();
            affected.sort_unstable();
            let mut touched: HashSet<(u32, u32)> = HashSet::new();
            for wi in affected {
                let f = freqs[wi];
                let old = &seqs[wi];
                for p in old.windows(2) {
                    let k = (p[0], p[1]);
                    *pair_count.get_mut(&k).expect("pair indexed") -= f;
                    touched.insert(k);
                }
                let mut new = Vec::with_capacity(old.len());
                let mut i = 0;
                while i < old.len() {
                    if i + 1 < old.len() && (old[i], old[i + 1]) == key {
                        new.push(new_sym);
                        i += 2;
                    } else {
                        new.push(old[i]);
                        i += 1;
                    }
                }
                for p in new.windows(2) {
                    let k = (p[0], p[1]);
                    *pair_count.entry(k).or_default() += f;
                    pair_words.entry(k).or_default().insert(wi);
                    touched.insert(k);
                }
                seqs[wi] = new;
            }
            pair_count.remove(&key);
            let mut touched: Vec<_> = touched.into_iter().filter(|k| *k != key).collect();
            touched.sort_unstable();
            for k in touched {
                let c = pair_count.get(&k).copied().unwrap_or(0);
                if c > 0 {
                    let l = sym_str[k.0 as usize].clone();
                    let r = sym_str[k.1 as usize].clone();
                    heap.push((c, Reverse((l, r)), k));
                }
            }
        }

        let mut alphabet: Vec<(String, u64)> = char_freq.into_iter().collect();
        alphabet.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let tokens: Vec<String> = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(merged_tokens)
            .chain(alphabet.into_iter().map(|(s, _)| s))
            .collect();
        Self::from_parts(tokens, merges)
    }

    fn from_parts(tokens: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        let mut vocab = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if vocab.insert(t.clone(), i as u32).is_some() {
                return Err(Error::data(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        let mut merge_ranks = HashMap::with_capacity(merges.len());
        for (rank, (l, r)) in merges.iter().enumerate() {
            let lookup = |s: &str| {
                vocab
                    .get(s)
                    .copied()
                    .ok_or_else(|| Error::data(format!("merge symbol `{s}` missing from vocab")))
            };
            let key = (lookup(l)?, lookup(r)?);
            let out = lookup(&format!("{l}{r}"))?;
            merge_ranks.entry(key).or_insert((rank, out));
        }
        Ok(Self {
            merges,
            tokens,
            vocab,
            merge_ranks,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.vocab.get(token).copied()
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let mut syms: Vec<u32> = word_symbols(word)
            .map(|s| self.vocab.get(&s).copied().unwrap_or(UNK_ID))
            .collect();
        loop {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, p)| self.merge_ranks.get(&(p[0], p[1])).map(|&(r, o)| (r, i, o)))
                .min();
            let Some((rank, _, new_id)) = best else {
                break;
            };
            let mut merged = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && self.merge_ranks.get(&(syms[i], syms[i + 1])).map(|m| m.0) == Some(rank) {
                    merged.push(new_id);
                    i += 2;
                } else {
                    merged.push(syms[i]);
                    i += 1;
                }
            }
            syms = merged;
        }
        out.extend(syms);
    }

    /// Encodes whitespace-separated text. Characters outside the trained
    /// alphabet become `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for w in text.split_whitespace() {
            self.encode_word(w, &mut out);
        }
        out
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut s = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(Error::TokenOutOfRange {
                id,
                vocab_size: self.vocab_size(),
            })?;
            s.push_str(tok);
        }
        let s = s.replace(BOUNDARY, " ");
        Ok(s.strip_prefix(' ').map(str::to_owned).unwrap_or(s))
    }

    /// Frequency rank of a non-special token: 0 for the first merge.
    pub fn token_rank(&self, id: u32) -> Result<usize> {
        if is_special(id) {
            return Err(Error::data(format!("special token {id} has no curriculum rank")));
        }
        if id as usize >= self.vocab_size() {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.vocab_size(),
            });
        }
        Ok(id as usize - NUM_SPECIALS)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = TokenizerFile {
            specials: SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect(),
            boundary: BOUNDARY.to_owned(),
            merges: self.merges.clone(),
            vocab: self
                .tokens
                .iter()
                .enumerate()
                .map(|(i, t)| (t.clone(), i as u32))
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: TokenizerFile = serde_json::from_str(json)?;
        if file.boundary != BOUNDARY {
            return Err(Error::data(format!("unsupported boundary marker `{}`", file.boundary)));
        }
        if file.specials != SPECIAL_TOKENS {
            return Err(Error::data(
                "tokenizer specials do not match <pad> <unk> <mask> <sep> <cls>",
            ));
        }
        let n = file.vocab.len();
        let mut tokens = vec![String::new(); n];
        for (t, id) in file.vocab {
            let slot = tokens
                .get_mut(id as usize)
                .ok_or_else(|| Error::data(format!("vocab id {id} is not contiguous")))?;
            *slot = t;
        }
        if tokens.iter().zip(SPECIAL_TOKENS).any(|(t, s)| t != s) {
            return Err(Error::data("specials must occupy ids 0..=4"));
        }
        Self::from_parts(tokens, file.merges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&json)
    }
}
