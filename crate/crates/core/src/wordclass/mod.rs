//! Word classes: unsupervised induction over token types, the cluster to
//! universal-tag mapping, and tagging/evaluation helpers.

mod hmm;
pub mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{is_special, Tokenizer};

pub use hmm::{induce, EmConfig, Induction};

pub const DEFAULT_NUM_CLUSTERS: usize = 30;

/// The ten universal tags found by the inducer, in lexical-to-functional
/// order, plus `Other` for anything unmapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Tag {
    Noun,
    Verb,
    Adj,
    Pron,
    Det,
    Adp,
    Num,
    Conj,
    Prt,
    #[serde(alias = "PUNC")]
    Pnct,
    Other,
}

impl Tag {
    /// Curriculum order; `Other` last.
    pub const ALL: [Tag; 11] = [
        Tag::Noun,
        Tag::Verb,
        Tag::Adj,
        Tag::Pron,
        Tag::Det,
        Tag::Adp,
        Tag::Num,
        Tag::Conj,
        Tag::Prt,
        Tag::Pnct,
        Tag::Other,
    ];

    pub const UNIVERSAL: [Tag; 10] = [
        Tag::Noun,
        Tag::Verb,
        Tag::Adj,
        Tag::Pron,
        Tag::Det,
        Tag::Adp,
        Tag::Num,
        Tag::Conj,
        Tag::Prt,
        Tag::Pnct,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Noun => "NOUN",
            Tag::Verb => "VERB",
            Tag::Adj => "ADJ",
            Tag::Pron => "PRON",
            Tag::Det => "DET",
            Tag::Adp => "ADP",
            Tag::Num => "NUM",
            Tag::Conj => "CONJ",
            Tag::Prt => "PRT",
            Tag::Pnct => "PNCT",
            Tag::Other => "OTHER",
        }
    }

    /// Position in the curriculum order.
    pub fn index(self) -> usize {
        self as usize
    }

    /// Class index for the ten-way head; `None` for `Other`.
    pub fn pos10_class(self) -> Option<usize> {
        (self != Tag::Other).then_some(self as usize)
    }

    /// Class index for the three-way head: NOUN, VERB, OTHER.
    pub fn pos3_class(self) -> usize {
        match self {
            Tag::Noun => 0,
            Tag::Verb => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Tag::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .or((s == "PUNC").then_some(Tag::Pnct))
            .ok_or_else(|| Error::data(format!("unknown word-class tag `{s}`")))
    }
}

/// Induced clusters keyed by token string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub num_clusters: usize,
    pub clusters: BTreeMap<String, usize>,
    /// Most frequent types per cluster, for assigning tags by inspection.
    #[serde(default)]
    pub top_types: BTreeMap<usize, Vec<String>>,
}

impl ClusterAssignment {
    pub fn from_induction(ind: &Induction, tok: &Tokenizer, top_k: usize) -> Result<Self> {
        let name = |id: u32| {
            tok.token(id).map(str::to_owned).ok_or(Error::TokenOutOfRange {
                id,
                vocab_size: tok.vocab_size(),
            })
        };
        let clusters = ind
            .assignment
            .iter()
            .map(|(&id, &c)| Ok((name(id)?, c)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let mut top_types = BTreeMap::new();
        for c in 0..ind.num_clusters {
            let mut members: Vec<(u64, u32)> = ind
                .assignment
                .iter()
                .filter(|(_, &k)| k == c)
                .map(|(&id, _)| (ind.type_counts[&id], id))
                .collect();
            members.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            let names = members
                .into_iter()
                .take(top_k)
                .map(|(_, id)| name(id))
                .collect::<Result<Vec<_>>>()?;
            top_types.insert(c, names);
        }
        Ok(Self {
            num_clusters: ind.num_clusters,
            clusters,
            top_types,
        })
    }

    /// A mapping with every cluster sent to `Other`, to be edited by hand.
    pub fn mapping_template(&self) -> ClusterMapping {
        ClusterMapping((0..self.num_clusters).map(|c| (c, Tag::Other)).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Hand-edited cluster id to tag table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClusterMapping(pub BTreeMap<usize, Tag>);

impl ClusterMapping {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Token type to word class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WordClassLexicon {
    pub clusters: BTreeMap<String, usize>,
    pub tag_map: BTreeMap<usize, Tag>,
}

pub fn map_clusters(assignment: &ClusterAssignment, mapping: &ClusterMapping) -> Result<WordClassLexicon> {
    let mut tag_map = BTreeMap::new();
    for c in 0..assignment.num_clusters {
        let tag = mapping
            .0
            .get(&c)
            .ok_or_else(|| Error::data(format!("cluster mapping has no entry for cluster {c}")))?;
        tag_map.insert(c, *tag);
    }
    if let Some(extra) = mapping.0.keys().find(|&&c| c >= assignment.num_clusters) {
        return Err(Error::data(format!(
            "cluster mapping names cluster {extra}, but only {} were induced",
            assignment.num_clusters
        )));
    }
    Ok(WordClassLexicon {
        clusters: assignment.clusters.clone(),
        tag_map,
    })
}

impl WordClassLexicon {
    pub fn tag_of(&self, token: &str) -> Tag {
        self.clusters
            .get(token)
            .and_then(|c| self.tag_map.get(c))
            .copied()
            .unwrap_or(Tag::Other)
    }

    /// Dense id to tag table over the whole vocabulary.
    pub fn id_tags(&self, tok: &Tokenizer) -> Vec<Tag> {
        (0..tok.vocab_size() as u32)
            .map(|id| {
                if is_special(id) {
                    Tag::Other
                } else {
                    tok.token(id).map_or(Tag::Other, |t| self.tag_of(t))
                }
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let lex: Self = read_json(path)?;
        if let Some((tok, c)) = lex.clusters.iter().find(|(_, c)| !lex.tag_map.contains_key(c)) {
            return Err(Error::data(format!(
                "lexicon: token `{tok}` is in cluster {c}, which has no tag"
            )));
        }
        Ok(lex)
    }
}

pub fn tag_tokens(lexicon: &WordClassLexicon, ids: &[u32], tok: &Tokenizer) -> Vec<Tag> {
    ids.iter()
        .map(|&id| {
            if is_special(id) {
                return Tag::Other;
            }
            tok.token(id).map_or(Tag::Other, |t| lexicon.tag_of(t))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TagScore {
    pub tag: Tag,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

impl fmt::Display for TagScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:.3} / {:.3} / {:.3}",
            self.tag, self.precision, self.recall, self.f1
        )
    }
}

/// Per-tag precision/recall/F1 for every tag that occurs in `pred` or
/// `gold`, in curriculum tag order.
pub fn evaluate_tags(pred: &[Tag], gold: &[Tag]) -> Result<Vec<TagScore>> {
    if pred.len() != gold.len() {
        return Err(Error::data(format!(
            "tag sequences differ in length: {} predicted vs {} gold",
            pred.len(),
            gold.len()
        )));
    }
    let mut rows = Vec::new();
    for tag in Tag::ALL {
        let tp = pred.iter().zip(gold).filter(|(p, g)| **p == tag && **g == tag).count();
        let n_pred = pred.iter().filter(|&&p| p == tag).count();
        let n_gold = gold.iter().filter(|&&g| g == tag).count();
        if n_pred == 0 && n_gold == 0 {
            continue;
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, n_pred);
        let recall = ratio(tp, n_gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        rows.push(TagScore {
            tag,
            precision,
            recall,
            f1,
            support: n_gold,
        });
    }
    Ok(rows)
}

/// Accuracy after mapping each predicted cluster to its most frequent gold
/// label.
pub fn many_to_one_accuracy(pred: &[usize], gold: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let mut table: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&p, &g) in pred.iter().zip(gold) {
        *table.entry(p).or_default().entry(g).or_default() += 1;
    }
    let correct: usize = table.values().map(|row| row.values().copied().max().unwrap_or(0)).sum();
    correct as f64 / pred.len() as f64
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&json).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}
