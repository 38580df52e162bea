//! Instruction normalization and function segmentation.
//!
//! Immediates that look like addresses are replaced by the literal word
//! `memoryaddress`; value-like immediates, displacements and registers are
//! kept. A function ends after every `ret`/`call`; in spaced style a
//! `push ebp` additionally opens a new function.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PulseError, Result};
use crate::trace::{Instruction, Label, RawSample};

pub const MEMORY_ADDRESS: &str = "memoryaddress";
pub const DEFAULT_ADDRESS_THRESHOLD: u64 = 0x10000;
pub const DEFAULT_MIN_FUNCTION_LEN: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    /// Instruction tokens kept as separate words.
    Spaced,
    /// Mnemonic and operands fused into one word per instruction.
    Concatenated,
}

impl std::str::FromStr for Style {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "spaced" | "nc" => Ok(Style::Spaced),
            "concatenated" | "c" => Ok(Style::Concatenated),
            other => Err(format!("unknown mode `{other}` (spaced|concatenated)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NormalizationMode {
    pub style: Style,
    #[serde(default = "default_threshold")]
    pub address_threshold: u64,
}

fn default_threshold() -> u64 {
    DEFAULT_ADDRESS_THRESHOLD
}

impl NormalizationMode {
    pub fn new(style: Style) -> Self {
        NormalizationMode {
            style,
            address_threshold: DEFAULT_ADDRESS_THRESHOLD,
        }
    }
}

impl Default for NormalizationMode {
    fn default() -> Self {
        Self::new(Style::Concatenated)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedFunction {
    pub words: Vec<String>,
    pub text: String,
    pub sample_id: String,
    pub label: Label,
    pub index_in_sample: usize,
    /// Index of the first source instruction within the sample.
    pub first_instruction: usize,
    pub n_instructions: usize,
}

/// Parsed value of a standalone immediate (`0x..` or decimal), or `None`.
/// Literals too wide for 64 bits saturate.
pub fn immediate_value(operand: &str) -> Option<u64> {
    let body = operand.strip_prefix('-').unwrap_or(operand);
    let (digits, radix) = match body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        Some(hex) => (hex, 16),
        None => (body, 10),
    };
    if digits.is_empty() || !digits.chars().all(|c| c.is_digit(radix)) {
        return None;
    }
    Some(u64::from_str_radix(digits, radix).unwrap_or(u64::MAX))
}

pub fn is_conditional_jump(mnemonic: &str) -> bool {
    mnemonic.starts_with('j') && mnemonic != "jmp"
}

pub fn is_control_transfer(mnemonic: &str) -> bool {
    mnemonic == "call" || mnemonic.starts_with('j')
}

pub fn is_return(mnemonic: &str) -> bool {
    matches!(mnemonic, "ret" | "retn" | "retf")
}

fn ends_function(instr: &Instruction) -> bool {
    is_return(&instr.mnemonic) || instr.mnemonic == "call"
}

fn is_frame_prologue(instr: &Instruction) -> bool {
    instr.is("push", &["ebp"])
}

/// Operands after address masking.
pub fn mask_operands(instr: &Instruction, threshold: u64) -> Vec<String> {
    let transfer = is_control_transfer(&instr.mnemonic) && instr.operands.len() == 1;
    instr
        .operands
        .iter()
        .map(|op| match immediate_value(op) {
            Some(_) if transfer => MEMORY_ADDRESS.to_string(),
            Some(v) if v >= threshold => MEMORY_ADDRESS.to_string(),
            _ => op.clone(),
        })
        .collect()
}

pub fn normalize_instruction(instr: &Instruction, mode: &NormalizationMode) -> Vec<String> {
    let operands = mask_operands(instr, mode.address_threshold);
    match mode.style {
        Style::Spaced => crate::trace::render_parts(&instr.mnemonic, &operands)
            .split_whitespace()
            .map(str::to_string)
            .collect(),
        Style::Concatenated => {
            let fused: String = operands
                .iter()
                .flat_map(|op| op.chars().filter(|c| !c.is_whitespace() && *c != ','))
                .collect();
            // Conditional jumps keep their target as a separate token.
            let word = if is_conditional_jump(&instr.mnemonic) && !fused.is_empty() {
                format!("{} {}", instr.mnemonic, fused)
            } else {
                format!("{}{}", instr.mnemonic, fused)
            };
            vec![word]
        }
    }
}

pub fn segment_functions(sample: &RawSample, mode: &NormalizationMode) -> Vec<NormalizedFunction> {
    let mut out = Vec::new();
    let mut words: Vec<String> = Vec::new();
    let mut start = 0usize;
    let mut count = 0usize;

    let mut close = |words: &mut Vec<String>, start: usize, count: usize| {
        if count == 0 {
            return;
        }
        let words = std::mem::take(words);
        out.push(NormalizedFunction {
            text: words.join(" "),
            words,
            sample_id: sample.sample_id.clone(),
            label: sample.label,
            index_in_sample: out.len(),
            first_instruction: start,
            n_instructions: count,
        });
    };

    for (i, instr) in sample.instructions.iter().enumerate() {
        if mode.style == Style::Spaced && is_frame_prologue(instr) && count > 0 {
            close(&mut words, start, count);
            start = i;
            count = 0;
        }
        words.extend(normalize_instruction(instr, mode));
        count += 1;
        if ends_function(instr) {
            close(&mut words, start, count);
            start = i + 1;
            count = 0;
        }
    }
    close(&mut words, start, count);
    out
}

/// Keep functions with at least `min_len` source instructions.
pub fn filter_short(functions: Vec<NormalizedFunction>, min_len: usize) -> Vec<NormalizedFunction> {
    functions
        .into_iter()
        .filter(|f| f.n_instructions >= min_len)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Sidecar {
    sample_id: String,
    label: Label,
    index_in_sample: usize,
    n_instructions: usize,
    #[serde(default)]
    first_instruction: usize,
    /// Word boundaries, since a word may itself contain a space.
    words: Vec<String>,
}

/// Write one function per line plus the JSON-lines sidecar.
pub fn write_functions(text_path: &Path, sidecar_path: &Path, functions: &[NormalizedFunction]) -> Result<()> {
    let mut text = BufWriter::new(fs::File::create(text_path).map_err(|e| PulseError::io(text_path, e))?);
    let mut side = BufWriter::new(fs::File::create(sidecar_path).map_err(|e| PulseError::io(sidecar_path, e))?);
    for f in functions {
        writeln!(text, "{}", f.text).map_err(|e| PulseError::io(text_path, e))?;
        let row = Sidecar {
            sample_id: f.sample_id.clone(),
            label: f.label,
            index_in_sample: f.index_in_sample,
            n_instructions: f.n_instructions,
            first_instruction: f.first_instruction,
            words: f.words.clone(),
        };
        writeln!(side, "{}", serde_json::to_string(&row)?).map_err(|e| PulseError::io(sidecar_path, e))?;
    }
    text.flush().map_err(|e| PulseError::io(text_path, e))?;
    side.flush().map_err(|e| PulseError::io(sidecar_path, e))
}

pub fn read_functions(text_path: &Path, sidecar_path: &Path) -> Result<Vec<NormalizedFunction>> {
    let text = fs::read_to_string(text_path).map_err(|e| PulseError::io(text_path, e))?;
    let side = fs::read_to_string(sidecar_path).map_err(|e| PulseError::io(sidecar_path, e))?;
    let lines: Vec<&str> = text.lines().collect();
    let rows: Vec<&str> = side.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() != rows.len() {
        return Err(PulseError::Data(format!(
            "{} has {} functions but sidecar has {} rows",
            text_path.display(),
            lines.len(),
            rows.len()
        )));
    }
    lines
        .into_iter()
        .zip(rows)
        .map(|(line, row)| {
            let meta: Sidecar = serde_json::from_str(row)?;
            Ok(NormalizedFunction {
                words: meta.words,
                text: line.to_string(),
                sample_id: meta.sample_id,
                label: meta.label,
                index_in_sample: meta.index_in_sample,
                first_instruction: meta.first_instruction,
                n_instructions: meta.n_instructions,
            })
        })
        .collect()
}
