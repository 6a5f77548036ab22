//! Seeded context-free grammar for synthetic training text and
//! minimal-pair suites.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MinimalPair;
use crate::error::{Error, Result};

const MAX_DEPTH: usize = 32;

/// Swapping the first terminal found in `pairs` (in either direction)
/// turns a grammatical sentence into its ungrammatical twin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwapRule {
    pub category: String,
    pub pairs: Vec<(String, String)>,
}

impl SwapRule {
    fn counterpart(&self, word: &str) -> Option<&str> {
        self.pairs.iter().find_map(|(a, b)| {
            if a == word {
                Some(b.as_str())
            } else if b == word {
                Some(a.as_str())
            } else {
                None
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grammar {
    pub name: String,
    pub start: String,
    /// Nonterminal to alternatives; any symbol without rules is a terminal.
    pub rules: BTreeMap<String, Vec<Vec<String>>>,
    #[serde(default)]
    pub swaps: Vec<SwapRule>,
}

impl Grammar {
    pub fn from_json(json: &str) -> Result<Self> {
        let g: Self = serde_json::from_str(json).map_err(|e| Error::config(format!("grammar: {e}")))?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rules.contains_key(&self.start) {
            return Err(Error::config(format!(
                "grammar start symbol {} has no rules",
                self.start
            )));
        }
        if let Some((nt, _)) = self
            .rules
            .iter()
            .find(|(_, alts)| alts.is_empty() || alts.iter().any(Vec::is_empty))
        {
            return Err(Error::config(format!("nonterminal {nt} has an empty alternative")));
        }
        for s in &self.swaps {
            if s.pairs.iter().any(|(a, b)| a == b) {
                return Err(Error::config(format!(
                    "swap category {} maps a word to itself",
                    s.category
                )));
            }
        }
        Ok(())
    }

    fn expand(&self, symbol: &str, depth: usize, rng: &mut ChaCha8Rng, out: &mut Vec<String>) -> Result<()> {
        if depth > MAX_DEPTH {
            return Err(Error::config("grammar recursion exceeds the depth limit"));
        }
        match self.rules.get(symbol) {
            None => out.push(symbol.to_string()),
            Some(alts) => {
                let alt = alts.choose(rng).expect("validated non-empty");
                for s in alt {
                    self.expand(s, depth + 1, rng, out)?;
                }
            }
        }
        Ok(())
    }

    /// One random derivation, alternatives chosen uniformly.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<String> {
        let mut words = Vec::new();
        self.expand(&self.start, 0, rng, &mut words)?;
        Ok(words.join(" "))
    }

    fn expansions(&self, symbol: &str, depth: usize, limit: usize) -> Result<Vec<Vec<String>>> {
        if depth > MAX_DEPTH {
            return Err(Error::config("grammar recursion exceeds the depth limit"));
        }
        let Some(alts) = self.rules.get(symbol) else {
            return Ok(vec![vec![symbol.to_string()]]);
        };
        let mut out = Vec::new();
        for alt in alts {
            let mut partial: Vec<Vec<String>> = vec![Vec::new()];
            for s in alt {
                let tails = self.expansions(s, depth + 1, limit)?;
                let mut next = Vec::with_capacity(partial.len() * tails.len());
                for p in &partial {
                    for t in &tails {
                        let mut v = p.clone();
                        v.extend(t.iter().cloned());
                        next.push(v);
                    }
                }
                if next.len() > limit {
                    return Err(Error::config(format!("grammar has more than {limit} sentence types")));
                }
                partial = next;
            }
            out.extend(partial);
        }
        Ok(out)
    }

    /// Every distinct sentence, sorted; errors if there are more than
    /// `limit` partial derivations.
    pub fn enumerate(&self, limit: usize) -> Result<Vec<String>> {
        let all: BTreeSet<String> = self
            .expansions(&self.start, 0, limit)?
            .into_iter()
            .map(|w| w.join(" "))
            .collect();
        Ok(all.into_iter().collect())
    }

    /// Ungrammatical twin of `good` for one swap category, if it applies.
    pub fn minimal_pair(&self, good: &str, category: &str) -> Option<MinimalPair> {
        let rule = self.swaps.iter().find(|s| s.category == category)?;
        let mut words: Vec<&str> = good.split(' ').collect();
        let i = words.iter().position(|w| rule.counterpart(w).is_some())?;
        words[i] = rule.counterpart(words[i])?;
        Some(MinimalPair {
            category: category.to_string(),
            good: good.to_string(),
            bad: words.join(" "),
        })
    }

    /// Up to `per_category` pairs per swap category, drawn without
    /// replacement from the shuffled sentence types.
    pub fn generate_suite(&self, per_category: usize, seed: u64) -> Result<Vec<MinimalPair>> {
        let mut types = self.enumerate(1_000_000)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        types.shuffle(&mut rng);
        let mut pairs = Vec::new();
        let mut used = HashSet::new();
        for rule in &self.swaps {
            let picked: Vec<MinimalPair> = types
                .iter()
                .filter(|s| !used.contains(*s))
                .filter_map(|s| self.minimal_pair(s, &rule.category))
                .take(per_category)
                .collect();
            if picked.len() < per_category {
                log::warn!(
                    "grammar {} yields only {} {} pairs",
                    self.name,
                    picked.len(),
                    rule.category
                );
            }
            used.extend(picked.iter().map(|p| p.good.clone()));
            pairs.extend(picked);
        }
        Ok(pairs)
    }

    /// `n` sampled sentences, skipping any in `exclude`.
    pub fn generate_corpus(&self, n: usize, seed: u64, exclude: &HashSet<String>) -> Result<Vec<String>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > n.saturating_mul(100).max(10_000) {
                return Err(Error::config(
                    "grammar yields too few sentences outside the held-out set",
                ));
            }
            let s = self.sample(&mut rng)?;
            if !exclude.contains(&s) {
                out.push(s);
            }
        }
        Ok(out)
    }
}
