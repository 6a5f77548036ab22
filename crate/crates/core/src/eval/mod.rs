//! Minimal-pair evaluation with per-category macro averaging.

mod grammar;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use grammar::{Grammar, SwapRule};

use crate::error::{Error, Result};
use crate::model::{pseudo_perplexity, MaskedLm};
use crate::tokenizer::{Tokenizer, UNK_ID};

const MACRO_ROW: &str = "macro";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinimalPair {
    pub category: String,
    pub good: String,
    pub bad: String,
}

impl MinimalPair {
    pub fn validate(&self) -> Result<()> {
        if self.good.trim().is_empty() || self.bad.trim().is_empty() {
            return Err(Error::data(format!("empty sentence in {} pair", self.category)));
        }
        if self.good == self.bad {
            return Err(Error::data(format!(
                "identical sentences in {} pair: {:?}",
                self.category, self.good
            )));
        }
        Ok(())
    }
}

pub fn read_suite(path: &Path) -> Result<Vec<MinimalPair>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: MinimalPair =
            serde_json::from_str(&line).map_err(|e| Error::data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        pair.validate()?;
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn write_suite(path: &Path, pairs: &[MinimalPair]) -> Result<()> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Token ids for a sentence, refusing text the vocabulary cannot cover.
pub fn encode_strict(tok: &Tokenizer, text: &str) -> Result<Vec<u32>> {
    let ids = tok.encode(text);
    if ids.is_empty() {
        return Err(Error::data(format!("sentence {text:?} has no tokens")));
    }
    if ids.contains(&UNK_ID) {
        return Err(Error::data(format!(
            "sentence {text:?} contains characters outside the vocabulary"
        )));
    }
    Ok(ids)
}

/// True when the good sentence has strictly lower pseudo-perplexity; ties
/// count against the model.
pub fn score_pair<M: MaskedLm + ?Sized>(model: &M, tok: &Tokenizer, pair: &MinimalPair) -> Result<bool> {
    let good = pseudo_perplexity(model, &encode_strict(tok, &pair.good)?)?;
    let bad = pseudo_perplexity(model, &encode_strict(tok, &pair.bad)?)?;
    Ok(good < bad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub per_category: BTreeMap<String, CategoryScore>,
    pub macro_average: f64,
}

impl SuiteResult {
    /// Aggregates `(category, won)` outcomes; the macro average weights
    /// every category equally regardless of its size.
    pub fn from_outcomes<'a>(outcomes: impl IntoIterator<Item = (&'a str, bool)>) -> Result<Self> {
        let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for (cat, won) in outcomes {
            let c = counts.entry(cat.to_string()).or_default();
            c.0 += won as usize;
            c.1 += 1;
        }
        Self::from_counts(counts)
    }

    /// `(correct, total)` per category. Categories without pairs are
    /// dropped with a warning.
    pub fn from_counts(counts: BTreeMap<String, (usize, usize)>) -> Result<Self> {
        let mut per_category = BTreeMap::new();
        for (cat, (correct, n)) in counts {
            if n == 0 {
                log::warn!("category {cat} has no pairs; left out of the macro average");
                continue;
            }
            per_category.insert(
                cat,
                CategoryScore {
                    accuracy: correct as f64 / n as f64,
                    n,
                },
            );
        }
        Self::from_scores(per_category)
    }

    fn from_scores(per_category: BTreeMap<String, CategoryScore>) -> Result<Self> {
        if per_category.is_empty() {
            return Err(Error::data("no scored categories"));
        }
        let macro_average = per_category.values().map(|s| s.accuracy).sum::<f64>() / per_category.len() as f64;
        Ok(Self {
            per_category,
            macro_average,
        })
    }

    pub fn total_pairs(&self) -> usize {
        self.per_category.values().map(|s| s.n).sum()
    }
}

pub fn evaluate_suite<M: MaskedLm + Sync + ?Sized>(
    model: &M,
    tok: &Tokenizer,
    pairs: &[MinimalPair],
) -> Result<SuiteResult> {
    if pairs.is_empty() {
        return Err(Error::data("evaluation suite is empty"));
    }
    let wins = pairs
        .par_iter()
        .map(|p| score_pair(model, tok, p))
        .collect::<Result<Vec<bool>>>()?;
    SuiteResult::from_outcomes(pairs.iter().map(|p| p.category.as_str()).zip(wins))
}

/// Mean pseudo-perplexity over the suite's grammatical sentences.
pub fn mean_good_perplexity<M: MaskedLm + Sync + ?Sized>(
    model: &M,
    tok: &Tokenizer,
    pairs: &[MinimalPair],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::data("evaluation suite is empty"));
    }
    let ppx = pairs
        .par_iter()
        .map(|p| pseudo_perplexity(model, &encode_strict(tok, &p.good)?))
        .collect::<Result<Vec<f64>>>()?;
    Ok(ppx.iter().sum::<f64>() / ppx.len() as f64)
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    category: String,
    accuracy: f64,
    n: usize,
}

/// CSV with `category,accuracy,n`, one row per category in name order,
/// then a `macro` row.
pub fn export_metrics(result: &SuiteResult, path: &Path) -> Result<()> {
    let bytes = metrics_csv(result)?;
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn metrics_csv(result: &SuiteResult) -> Result<Vec<u8>> {
    if result.per_category.contains_key(MACRO_ROW) {
        return Err(Error::data("a category may not be named `macro`"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::data(format!("csv: {e}"));
    for (cat, s) in &result.per_category {
        w.serialize(Row {
            category: cat.clone(),
            accuracy: s.accuracy,
            n: s.n,
        })
        .map_err(csv_err)?;
    }
    w.serialize(Row {
        category: MACRO_ROW.into(),
        accuracy: result.macro_average,
        n: result.total_pairs(),
    })
    .map_err(csv_err)?;
    w.into_inner().map_err(|e| Error::data(format!("csv: {e}")))
}

pub fn parse_metrics(bytes: &[u8]) -> Result<SuiteResult> {
    let mut per_category = BTreeMap::new();
    let mut macro_row = None;
    for row in csv::Reader::from_reader(bytes).deserialize::<Row>() {
        let row = row.map_err(|e| Error::data(format!("metrics csv: {e}")))?;
        if row.category == MACRO_ROW {
            macro_row = Some(row.accuracy);
        } else {
            per_category.insert(
                row.category,
                CategoryScore {
                    accuracy: row.accuracy,
                    n: row.n,
                },
            );
        }
    }
    let parsed = SuiteResult::from_scores(per_category)?;
    match macro_row {
        Some(m) if m == parsed.macro_average => Ok(parsed),
        Some(m) => Err(Error::data(format!(
            "macro row {m} disagrees with category mean {}",
            parsed.macro_average
        ))),
        None => Err(Error::data("metrics csv has no macro row")),
    }
}
