//! Corpus ingestion: raw lines to cleaned, difficulty-annotated instances.

mod clean;
mod pack;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use clean::{default_rules_json, CleaningRuleset, FilterRule, PunctuationRule, RewriteRule, RulesetManifest};
pub use pack::{pack_sequences, PackConfig, PackedInstance};

/// Lines joined per instance for transcribed-speech sources.
pub const DEFAULT_SPEECH_GROUP: usize = 5;

/// One line of a source file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawLine {
    pub text: String,
    pub source: String,
    pub line_index: usize,
}

impl RawLine {
    pub fn from_bytes(bytes: &[u8], source: &str, line_index: usize) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|_| Error::Decode {
            source_name: source.to_owned(),
            line: line_index,
        })?;
        Ok(Self {
            text: text.to_owned(),
            source: source.to_owned(),
            line_index,
        })
    }
}

/// A single training unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub instance_id: u64,
    pub text: String,
    pub source: String,
    pub level: u8,
    #[serde(skip)]
    pub token_ids: Vec<u32>,
    #[serde(skip)]
    pub difficulty: f64,
}

pub fn clean_line(raw: &RawLine, rules: &CleaningRuleset) -> Option<String> {
    rules.clean(&raw.text)
}

/// Joins every `k` contiguous lines with a single space. A trailing group
/// shorter than `k` is kept as its own entry.
pub fn concat_speech(lines: &[String], k: usize) -> Vec<String> {
    let k = k.max(1);
    lines.chunks(k).map(|group| group.join(" ")).collect()
}

/// Source name to difficulty level (1 = easiest, 6 = hardest).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LevelTable(BTreeMap<String, u8>);

impl LevelTable {
    pub fn new(map: BTreeMap<String, u8>) -> Result<Self> {
        if let Some((name, level)) = map.iter().find(|(_, l)| !(1..=6).contains(*l)) {
            return Err(Error::config(format!(
                "level {level} for source `{name}` is outside 1..=6"
            )));
        }
        Ok(Self(map))
    }

    pub fn get(&self, source: &str) -> Option<u8> {
        self.0.get(source).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u8)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl Default for LevelTable {
    fn default() -> Self {
        let table = [
            ("AO-CHILDES", 1),
            ("BNC Spoken", 2),
            ("Switchboard", 2),
            ("Open Subtitles", 3),
            ("QED", 3),
            ("CBT", 4),
            ("Children's Stories", 4),
            ("Simple Wikipedia", 5),
            ("Wikipedia", 6),
            ("Gutenberg", 6),
        ];
        Self(table.iter().map(|(k, v)| (k.to_string(), *v)).collect())
    }
}

pub fn assign_level(source: &str, table: &LevelTable) -> Result<u8> {
    table.get(source).ok_or_else(|| Error::UnknownSource(source.to_owned()))
}

/// Transcribed-speech sources whose lines are grouped. BNC Spoken is
/// deliberately absent.
pub fn is_default_speech_source(source: &str) -> bool {
    matches!(source, "AO-CHILDES" | "Switchboard" | "Open Subtitles" | "QED")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceEntry {
    pub name: String,
    pub path: PathBuf,
    /// Overrides the built-in speech classification for known sources.
    #[serde(default)]
    pub speech: Option<bool>,
}

impl SourceEntry {
    pub fn is_speech(&self) -> bool {
        self.speech.unwrap_or_else(|| is_default_speech_source(&self.name))
    }
}

/// Corpus manifest: the list of source files plus the level table.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub sources: Vec<SourceEntry>,
    #[serde(default)]
    pub levels: Option<LevelTable>,
    /// Path to a cleaning ruleset manifest; the bundled one when absent.
    #[serde(default)]
    pub ruleset: Option<PathBuf>,
    #[serde(default = "default_group")]
    pub speech_group: usize,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_group() -> usize {
    DEFAULT_SPEECH_GROUP
}

impl CorpusManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: CorpusManifest =
            serde_json::from_str(&json).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(manifest)
    }

    pub fn level_table(&self) -> LevelTable {
        self.levels.clone().unwrap_or_default()
    }

    pub fn ruleset(&self) -> Result<CleaningRuleset> {
        match &self.ruleset {
            Some(p) => CleaningRuleset::load(&self.base_dir.join(p)),
            None => Ok(CleaningRuleset::default()),
        }
    }

    pub fn resolve(&self, entry: &SourceEntry) -> PathBuf {
        self.base_dir.join(&entry.path)
    }
}

/// Counts reported by [`preprocess`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub lines_in: usize,
    pub instances_out: usize,
    pub words_out: usize,
}

/// Reads a source file into raw lines. Invalid UTF-8 is an error.
pub fn read_source(path: &Path, source: &str) -> Result<Vec<RawLine>> {
    let file =
        std::fs::File::open(path).map_err(|e| Error::data(format!("source `{source}` ({}): {e}", path.display())))?;
    let mut reader = std::io::BufReader::new(file);
    let mut lines = Vec::new();
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        while matches!(buf.last(), Some(b'\n' | b'\r')) {
            buf.pop();
        }
        lines.push(RawLine::from_bytes(&buf, source, lines.len())?);
    }
    Ok(lines)
}

/// Cleans, groups and labels the lines of one source. Instance ids start at
/// `first_id`.
pub fn build_instances(
    lines: &[RawLine],
    source: &str,
    speech: bool,
    group: usize,
    rules: &CleaningRuleset,
    levels: &LevelTable,
    first_id: u64,
) -> Result<Vec<Instance>> {
    let level = assign_level(source, levels)?;
    let cleaned: Vec<String> = lines.iter().filter_map(|l| clean_line(l, rules)).collect();
    let texts = if speech {
        concat_speech(&cleaned, group)
    } else {
        cleaned
    };
    Ok(texts
        .into_iter()
        .enumerate()
        .map(|(i, text)| Instance {
            instance_id: first_id + i as u64,
            text,
            source: source.to_owned(),
            level,
            token_ids: Vec::new(),
            difficulty: 0.0,
        })
        .collect())
}

/// Runs the whole cleaning pipeline over a manifest, in manifest order.
pub fn preprocess(manifest: &CorpusManifest) -> Result<(Vec<Instance>, PreprocessReport)> {
    if manifest.sources.is_empty() {
        return Err(Error::config("corpus manifest lists no sources"));
    }
    let rules = manifest.ruleset()?;
    let levels = manifest.level_table();
    let mut report = PreprocessReport::default();
    let mut instances = Vec::new();
    for entry in &manifest.sources {
        // fail on unmapped sources before touching the file
        assign_level(&entry.name, &levels)?;
        let lines = read_source(&manifest.resolve(entry), &entry.name)?;
        report.lines_in += lines.len();
        let built = build_instances(
            &lines,
            &entry.name,
            entry.is_speech(),
            manifest.speech_group,
            &rules,
            &levels,
            instances.len() as u64,
        )?;
        instances.extend(built);
    }
    report.instances_out = instances.len();
    report.words_out = instances.iter().map(|i| i.text.split_whitespace().count()).sum();
    Ok((instances, report))
}

pub fn write_jsonl(path: &Path, instances: &[Instance]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for inst in instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Instance>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::data(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_groups_of_five() {
        let lines: Vec<String> = (0..5).map(|i| format!("l{i}")).collect();
        assert_eq!(concat_speech(&lines, 5), vec!["l0 l1 l2 l3 l4"]);
        assert_eq!(concat_speech(&lines[..1], 5), vec!["l0"]);
    }

    #[test]
    fn concat_keeps_remainder() {
        let lines: Vec<String> = (0..12).map(|i| format!("l{i}")).collect();
        let sizes: Vec<usize> = concat_speech(&lines, 5).iter().map(|s| s.split(' ').count()).collect();
        assert_eq!(sizes, vec![5, 5, 2]);
    }

    #[test]
    fn default_levels() {
        let t = LevelTable::default();
        assert_eq!(assign_level("AO-CHILDES", &t).unwrap(), 1);
        assert_eq!(assign_level("BNC Spoken", &t).unwrap(), 2);
        assert_eq!(assign_level("Switchboard", &t).unwrap(), 2);
        assert_eq!(assign_level("Open Subtitles", &t).unwrap(), 3);
        assert_eq!(assign_level("QED", &t).unwrap(), 3);
        assert_eq!(assign_level("CBT", &t).unwrap(), 4);
        assert_eq!(assign_level("Children's Stories", &t).unwrap(), 4);
        assert_eq!(assign_level("Simple Wikipedia", &t).unwrap(), 5);
        assert_eq!(assign_level("Wikipedia", &t).unwrap(), 6);
        assert_eq!(assign_level("Gutenberg", &t).unwrap(), 6);
        assert!(matches!(
            assign_level("my-corpus", &t),
            Err(Error::UnknownSource(s)) if s == "my-corpus"
        ));
    }

    #[test]
    fn level_range_checked() {
        let mut m = BTreeMap::new();
        m.insert("x".to_string(), 7);
        assert!(LevelTable::new(m).is_err());
    }

    #[test]
    fn invalid_utf8_is_a_decode_error() {
        let err = RawLine::from_bytes(&[0x66, 0xff, 0x66], "QED", 3).unwrap_err();
        assert!(matches!(err, Error::Decode { line: 3, .. }));
    }

    #[test]
    fn instances_are_labelled_and_grouped() {
        let rules = CleaningRuleset::default();
        let levels = LevelTable::default();
        let lines: Vec<RawLine> = ["Hi there.", "", "You OK?", "yes", "[laughs]", "good", "Bye"]
            .iter()
            .enumerate()
            .map(|(i, t)| RawLine {
                text: t.to_string(),
                source: "AO-CHILDES".into(),
                line_index: i,
            })
            .collect();
        let out = build_instances(&lines, "AO-CHILDES", true, 5, &rules, &levels, 10).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].text, "hi there. you ok? yes good bye");
        assert_eq!(out[0].level, 1);
        assert_eq!(out[0].instance_id, 10);
    }

    #[test]
    fn jsonl_field_order_is_fixed() {
        let inst = Instance {
            instance_id: 3,
            text: "a b".into(),
            source: "QED".into(),
            level: 3,
            token_ids: vec![1, 2],
            difficulty: 0.5,
        };
        assert_eq!(
            serde_json::to_string(&inst).unwrap(),
            r#"{"instance_id":3,"text":"a b","source":"QED","level":3}"#
        );
    }
}
