//! Trace ingestion: one executed instruction per line, samples named
//! `Type-Family-Hash.txt`, corpora described by a JSON manifest.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PulseError, Result};

pub const COMMENT_PREFIX: char = '#';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Malicious,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Benign => 0,
            Label::Malicious => 1,
        }
    }

    pub fn from_index(i: usize) -> Label {
        if i == 1 {
            Label::Malicious
        } else {
            Label::Benign
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Benign => "benign",
            Label::Malicious => "malicious",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

/// One decoded instruction: lowercase mnemonic plus operand texts.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub mnemonic: String,
    pub operands: Vec<String>,
    pub raw: String,
}

impl Instruction {
    /// Canonical text: `mnemonic op1, op2`.
    pub fn render(&self) -> String {
        render_parts(&self.mnemonic, &self.operands)
    }

    pub fn is(&self, mnemonic: &str, operands: &[&str]) -> bool {
        self.mnemonic == mnemonic
            && self.operands.len() == operands.len()
            && self.operands.iter().zip(operands).all(|(a, b)| a == b)
    }
}

pub(crate) fn render_parts(mnemonic: &str, operands: &[String]) -> String {
    if operands.is_empty() {
        mnemonic.to_string()
    } else {
        format!("{} {}", mnemonic, operands.join(", "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParsedLine {
    Instruction(Instruction),
    Skip,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseIssue {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parse one trace line. Blank lines and `#` comments yield [`ParsedLine::Skip`].
pub fn parse_trace_line(line: &str) -> std::result::Result<ParsedLine, String> {
    let line = line.trim_end_matches(['\r', '\n']);
    if let Some(c) = line.chars().find(|c| c.is_control() && *c != '\t') {
        return Err(format!("non-printable character U+{:04X}", c as u32));
    }
    let trimmed = line.trim();
    if trimmed.is_empty() || trimmed.starts_with(COMMENT_PREFIX) {
        return Ok(ParsedLine::Skip);
    }
    let (head, rest) = match trimmed.find(char::is_whitespace) {
        Some(i) => (&trimmed[..i], trimmed[i..].trim()),
        None => (trimmed, ""),
    };
    let mnemonic = head.to_lowercase();
    let mut operands = Vec::new();
    if !rest.is_empty() {
        let mut depth = 0i32;
        let mut current = String::new();
        for c in rest.chars() {
            match c {
                '[' => depth += 1,
                ']' => depth -= 1,
                _ => {}
            }
            if c == ',' && depth == 0 {
                operands.push(std::mem::take(&mut current));
            } else {
                current.push(c);
            }
        }
        if depth != 0 {
            return Err("unbalanced brackets".to_string());
        }
        operands.push(current);
        for op in operands.iter_mut() {
            *op = collapse_ws(op);
            if op.is_empty() {
                return Err("empty operand".to_string());
            }
        }
    }
    Ok(ParsedLine::Instruction(Instruction {
        mnemonic,
        operands,
        raw: line.to_string(),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    pub sample_id: String,
    pub label: Label,
    pub family: String,
    pub instructions: Vec<Instruction>,
    #[serde(default)]
    pub parse_errors: Vec<ParseIssue>,
}

/// Components of a `Type-Family-Hash` file stem.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleName {
    pub kind: String,
    pub family: String,
    pub hash: String,
}

impl SampleName {
    pub fn parse(stem: &str) -> Option<SampleName> {
        let mut parts = stem.splitn(3, '-');
        let kind = parts.next()?.to_string();
        let family = parts.next()?.to_string();
        let hash = parts.next()?.to_string();
        if kind.is_empty() || family.is_empty() || hash.is_empty() {
            return None;
        }
        Some(SampleName { kind, family, hash })
    }

    /// `Benign` maps to benign; every other type (Ransomware, Trojan, ...) is malicious.
    pub fn label(&self) -> Label {
        if self.kind.eq_ignore_ascii_case("benign") {
            Label::Benign
        } else {
            Label::Malicious
        }
    }
}

pub fn sample_id_from_path(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Parse trace text. Malformed lines are recorded and skipped.
pub fn parse_trace(bytes: &[u8]) -> (Vec<Instruction>, Vec<ParseIssue>) {
    let mut instructions = Vec::new();
    let mut issues = Vec::new();
    for (i, line) in bytes.split(|b| *b == b'\n').enumerate() {
        let parsed = std::str::from_utf8(line)
            .map_err(|_| "invalid utf-8".to_string())
            .and_then(parse_trace_line);
        match parsed {
            Ok(ParsedLine::Instruction(instr)) => instructions.push(instr),
            Ok(ParsedLine::Skip) => {}
            Err(message) => issues.push(ParseIssue {
                line: i + 1,
                message,
            }),
        }
    }
    (instructions, issues)
}

pub fn load_sample(path: &Path, label: Label, family: &str) -> Result<RawSample> {
    let bytes = fs::read(path).map_err(|e| PulseError::io(path, e))?;
    let (instructions, parse_errors) = parse_trace(&bytes);
    for issue in &parse_errors {
        log::warn!("{}:{}: {}", path.display(), issue.line, issue.message);
    }
    if instructions.is_empty() {
        return Err(PulseError::EmptySample {
            path: path.to_path_buf(),
        });
    }
    Ok(RawSample {
        sample_id: sample_id_from_path(path),
        label,
        family: family.to_string(),
        instructions,
        parse_errors,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub sample_id: String,
    pub label: Label,
    pub family: String,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative entry paths are resolved against.
    pub base_dir: PathBuf,
}

impl CorpusManifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = CorpusManifest {
            entries,
            base_dir: base_dir.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PulseError::io(path, e))?;
        let entries: Vec<ManifestEntry> = serde_json::from_str(&text)
            .map_err(|e| PulseError::Config(format!("manifest {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(entries, base)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.entries)?;
        fs::write(path, text).map_err(|e| PulseError::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let mut paths = HashSet::new();
        let mut ids = HashSet::new();
        for e in &self.entries {
            if !paths.insert(&e.path) {
                return Err(PulseError::Config(format!(
                    "manifest lists {} twice",
                    e.path.display()
                )));
            }
            if !ids.insert(&e.sample_id) {
                return Err(PulseError::Config(format!(
                    "duplicate sample_id {}",
                    e.sample_id
                )));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base_dir.join(&entry.path)
        }
    }

    pub fn split_counts(&self) -> SplitCounts {
        let mut c = SplitCounts::default();
        for e in &self.entries {
            c.add(e.split, e.label);
        }
        c
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train_benign: usize,
    pub train_malicious: usize,
    pub validation_benign: usize,
    pub validation_malicious: usize,
    pub test_benign: usize,
    pub test_malicious: usize,
}

impl SplitCounts {
    fn add(&mut self, split: Split, label: Label) {
        let slot = match (split, label) {
            (Split::Train, Label::Benign) => &mut self.train_benign,
            (Split::Train, Label::Malicious) => &mut self.train_malicious,
            (Split::Validation, Label::Benign) => &mut self.validation_benign,
            (Split::Validation, Label::Malicious) => &mut self.validation_malicious,
            (Split::Test, Label::Benign) => &mut self.test_benign,
            (Split::Test, Label::Malicious) => &mut self.test_malicious,
        };
        *slot += 1;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSample {
    pub split: Split,
    pub sample: RawSample,
}

/// Load every manifest entry (in parallel, result in manifest order).
pub fn load_corpus(manifest: &CorpusManifest) -> Result<Vec<LoadedSample>> {
    manifest.validate()?;
    let loaded: Vec<Result<LoadedSample>> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let path = manifest.resolve(e);
            let mut sample = load_sample(&path, e.label, &e.family)?;
            sample.sample_id = e.sample_id.clone();
            Ok(LoadedSample {
                split: e.split,
                sample,
            })
        })
        .collect();
    let samples = loaded.into_iter().collect::<Result<Vec<_>>>()?;
    let c = manifest.split_counts();
    log::info!(
        "loaded {} samples (train {}+{}, validation {}+{}, test {}+{} benign+malicious)",
        samples.len(),
        c.train_benign,
        c.train_malicious,
        c.validation_benign,
        c.validation_malicious,
        c.test_benign,
        c.test_malicious
    );
    Ok(samples)
}
