//! Line cleaning: lowercasing, punctuation normalization, typographic
//! standardization and extraneous-line filters, driven by a versioned rule
//! manifest.

use std::collections::HashMap;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_RULES: &str = include_str!("../../assets/cleaning_rules.json");

/// Upper bound on rule-application rounds; every shipped rule set reaches a
/// fixpoint in two.
const MAX_ROUNDS: usize = 8;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PunctuationRule {
    pub id: String,
    pub from: Vec<String>,
    pub to: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewriteRule {
    pub id: String,
    pub pattern: String,
    pub replace: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterRule {
    pub id: String,
    pub pattern: String,
    #[serde(default)]
    pub description: String,
}

/// The serialized form of a cleaning ruleset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RulesetManifest {
    pub version: String,
    #[serde(default)]
    pub approximate: bool,
    #[serde(default)]
    pub note: String,
    pub lowercase: bool,
    pub punctuation: Vec<PunctuationRule>,
    pub typography: Vec<RewriteRule>,
    pub filters: Vec<FilterRule>,
}

/// A compiled cleaning ruleset.
#[derive(Debug, Clone)]
pub struct CleaningRuleset {
    manifest: RulesetManifest,
    punctuation: HashMap<char, String>,
    rewrites: Vec<(Regex, String)>,
    filters: Vec<(String, Regex)>,
}

impl CleaningRuleset {
    pub fn from_manifest(manifest: RulesetManifest) -> Result<Self> {
        let mut punctuation = HashMap::new();
        for rule in &manifest.punctuation {
            for from in &rule.from {
                let mut chars = from.chars();
                let (Some(c), None) = (chars.next(), chars.next()) else {
                    return Err(Error::config(format!(
                        "punctuation rule {}: `{from}` is not a single character",
                        rule.id
                    )));
                };
                punctuation.insert(c, rule.to.clone());
            }
        }
        let compile = |id: &str, pattern: &str| {
            Regex::new(pattern).map_err(|e| Error::config(format!("cleaning rule {id}: bad pattern: {e}")))
        };
        let rewrites = manifest
            .typography
            .iter()
            .map(|r| Ok((compile(&r.id, &r.pattern)?, r.replace.clone())))
            .collect::<Result<Vec<_>>>()?;
        let filters = manifest
            .filters
            .iter()
            .map(|r| Ok((r.id.clone(), compile(&r.id, &r.pattern)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            manifest,
            punctuation,
            rewrites,
            filters,
        })
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Self::from_manifest(serde_json::from_str(json)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&json)
    }

    pub fn version(&self) -> &str {
        &self.manifest.version
    }

    pub fn manifest(&self) -> &RulesetManifest {
        &self.manifest
    }

    fn rewrite_once(&self, text: &str) -> String {
        let mut out = if self.manifest.lowercase {
            text.to_lowercase()
        } else {
            text.to_owned()
        };
        if !self.punctuation.is_empty() {
            let mut mapped = String::with_capacity(out.len());
            for c in out.chars() {
                match self.punctuation.get(&c) {
                    Some(to) => mapped.push_str(to),
                    None => mapped.push(c),
                }
            }
            out = mapped;
        }
        for (re, replace) in &self.rewrites {
            if re.is_match(&out) {
                out = re.replace_all(&out, replace.as_str()).into_owned();
            }
        }
        out
    }

    /// Returns the id of the first filter rule matching `cleaned`, if any.
    pub fn filtered_by(&self, cleaned: &str) -> Option<&str> {
        if cleaned.is_empty() {
            return Some("empty");
        }
        self.filters
            .iter()
            .find(|(_, re)| re.is_match(cleaned))
            .map(|(id, _)| id.as_str())
    }

    /// Normalizes `text`, returning `None` when the line is filtered out.
    pub fn clean(&self, text: &str) -> Option<String> {
        let mut current = self.rewrite_once(text);
        for _ in 1..MAX_ROUNDS {
            let next = self.rewrite_once(&current);
            if next == current {
                break;
            }
            current = next;
        }
        match self.filtered_by(&current) {
            Some(_) => None,
            None => Some(current),
        }
    }
}

impl Default for CleaningRuleset {
    fn default() -> Self {
        Self::from_json(DEFAULT_RULES).expect("bundled cleaning rules are valid")
    }
}

/// Bundled ruleset manifest text, for writing next to run outputs.
pub fn default_rules_json() -> &'static str {
    DEFAULT_RULES
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rules() -> CleaningRuleset {
        CleaningRuleset::default()
    }

    #[test]
    fn lowercases() {
        assert_eq!(rules().clean("Hello WORLD!").as_deref(), Some("hello world!"));
    }

    #[test]
    fn empty_line_is_filtered() {
        assert_eq!(rules().clean(""), None);
        assert_eq!(rules().clean("   \t "), None);
    }

    #[test]
    fn typographic_quotes_and_dashes() {
        assert_eq!(rules().clean("“quote” — dash").as_deref(), Some("\"quote\" - dash"));
        assert_eq!(rules().clean("wait… what").as_deref(), Some("wait... what"));
        assert_eq!(rules().clean("it’s  fine ,  ok").as_deref(), Some("it's fine, ok"));
    }

    #[test]
    fn extraneous_lines() {
        let r = rules();
        assert_eq!(r.clean("42"), None);
        assert_eq!(r.clean("Page 17"), None);
        assert_eq!(r.clean("[laughs]"), None);
        assert_eq!(r.clean("(Applause)"), None);
        assert_eq!(r.clean("[1] Smith, J. Some book. 1999"), None);
        assert_eq!(r.clean("|---|---|"), None);
        assert_eq!(r.clean("====="), None);
        assert!(r.clean("[he laughs loudly]").is_some());
        assert!(r.clean("there were 42 apples").is_some());
    }

    #[test]
    fn rejects_bad_manifest() {
        let mut m = rules().manifest().clone();
        m.typography.push(RewriteRule {
            id: "X".into(),
            pattern: "(".into(),
            replace: String::new(),
        });
        assert!(matches!(CleaningRuleset::from_manifest(m), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn cleaning_is_idempotent(s in "\\PC{0,60}") {
            let r = rules();
            if let Some(once) = r.clean(&s) {
                prop_assert_eq!(r.clean(&once), Some(once.clone()));
            }
        }

        #[test]
        fn cleaning_is_idempotent_on_punctuation_soup(s in "[ a-zA-Z.,;:!?\\-—–…“”‘’\\[\\]()*|0-9\t]{0,40}") {
            let r = rules();
            if let Some(once) = r.clean(&s) {
                prop_assert_eq!(r.clean(&once), Some(once.clone()));
            }
        }
    }
}
