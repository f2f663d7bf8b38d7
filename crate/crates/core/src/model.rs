//! Value types shared by the pipeline, evaluation and attention modules.
//!
//! Everything here is an immutable value after construction. Offsets are
//! counted in Unicode scalar values (`char`s), never bytes, so a span located
//! in a prompt can be handed to tooling in other languages unchanged.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("risk span is empty or whitespace-only")]
    EmptySpan,
    #[error("risk type label is empty")]
    EmptyRiskLabel,
}

/// The kind of semantic risk a span carries.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "label")]
pub enum RiskType {
    /// An unclear referent ("it", "they", "the company").
    Referential,
    /// A premise or background assumption the question leaves out.
    MissingAssumption,
    /// An unclear ordering or timing of events.
    Temporal,
    Other(String),
}

impl RiskType {
    /// Maps a free-text label onto the taxonomy by keyword.
    ///
    /// Matching is case-insensitive and checks `referen`, then
    /// `assum`/`premise`, then `tempor`. Anything else is kept verbatim
    /// (trimmed) as [`RiskType::Other`].
    pub fn from_label(label: &str) -> Result<Self, ModelError> {
        let trimmed = label.trim();
        if trimmed.is_empty() {
            return Err(ModelError::EmptyRiskLabel);
        }
        let lower = trimmed.to_lowercase();
        Ok(if lower.contains("referen") {
            RiskType::Referential
        } else if lower.contains("assum") || lower.contains("premise") {
            RiskType::MissingAssumption
        } else if lower.contains("tempor") {
            RiskType::Temporal
        } else {
            RiskType::Other(trimmed.to_string())
        })
    }

    /// Human-readable label, also used in the Layer-1 wire format.
    pub fn label(&self) -> &str {
        match self {
            RiskType::Referential => "referential ambiguity",
            RiskType::MissingAssumption => "missing assumption",
            RiskType::Temporal => "temporal ambiguity",
            RiskType::Other(label) => label,
        }
    }
}

impl fmt::Display for RiskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A typed span of the prompt flagged as a semantic risk.
///
/// When `located` is true, `start..end` are char offsets into the prompt and
/// `span` is exactly the prompt's text at that range. When the span could not
/// be found (the model paraphrased it), `start == end == 0` and `span` holds
/// the model's text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskPoint {
    pub span: String,
    pub start: usize,
    pub end: usize,
    pub risk_type: RiskType,
    pub located: bool,
}

impl RiskPoint {
    /// An unvalidated candidate, as produced by a parser before locating.
    pub fn candidate(span: impl Into<String>, risk_type: RiskType) -> Self {
        RiskPoint { span: span.into(), start: 0, end: 0, risk_type, located: false }
    }
}

/// Re-locates `candidate` in `prompt`.
///
/// The span is trimmed and searched for case-insensitively; the first match
/// wins. On a match the stored span is replaced by the prompt's own text so
/// that `prompt[start..end] == span` holds with the prompt's casing.
pub fn validate_risk_point(candidate: RiskPoint, prompt: &str) -> Result<RiskPoint, ModelError> {
    let needle = candidate.span.trim();
    if needle.is_empty() {
        return Err(ModelError::EmptySpan);
    }
    let hay: Vec<char> = prompt.chars().collect();
    let pat: Vec<char> = needle.chars().collect();

    match find_case_insensitive(&hay, &pat) {
        Some(start) => {
            let end = start + pat.len();
            Ok(RiskPoint {
                span: hay[start..end].iter().collect(),
                start,
                end,
                risk_type: candidate.risk_type,
                located: true,
            })
        }
        None => {
            Ok(RiskPoint { span: needle.to_string(), start: 0, end: 0, risk_type: candidate.risk_type, located: false })
        }
    }
}

fn find_case_insensitive(hay: &[char], pat: &[char]) -> Option<usize> {
    if pat.len() > hay.len() {
        return None;
    }
    (0..=hay.len() - pat.len()).find(|&i| pat.iter().zip(&hay[i..]).all(|(a, b)| chars_eq_ignore_case(*a, *b)))
}

fn chars_eq_ignore_case(a: char, b: char) -> bool {
    a == b || a.to_lowercase().eq(b.to_lowercase())
}

/// Substring of `text` by char offsets. Panics if out of range.
pub fn char_slice(text: &str, start: usize, end: usize) -> String {
    text.chars().skip(start).take(end - start).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    First,
    Second,
}

/// One reading of one risk point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interpretation {
    pub risk_index: usize,
    pub channel: Channel,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// Returns `None` for an empty vector.
    pub fn new(values: Vec<f64>) -> Option<Self> {
        if values.is_empty() {
            None
        } else {
            Some(EmbeddingVector { values })
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }
}

/// Outcome of the dual-interpretation consistency gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyVerdict {
    pub similarity: f64,
    pub threshold: f64,
    pub consistent: bool,
}

impl ConsistencyVerdict {
    pub fn new(similarity: f64, threshold: f64) -> Self {
        ConsistencyVerdict { similarity, threshold, consistent: similarity >= threshold }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionSource {
    /// Both readings agreed and were concatenated.
    Fused,
    /// The readings disagreed and a resolver call merged them.
    ConflictResolved,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedExplanation {
    pub risk_index: usize,
    pub text: String,
    pub source: ResolutionSource,
}

/// Separator placed between the two readings of a fused pair.
pub const FUSION_SEPARATOR: &str = "\n";

impl ResolvedExplanation {
    pub fn fused(risk_index: usize, first: &str, second: &str) -> Self {
        ResolvedExplanation {
            risk_index,
            text: format!("{first}{FUSION_SEPARATOR}{second}"),
            source: ResolutionSource::Fused,
        }
    }
}

/// The aggregated supplemental context appended to the prompt.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnhancedContext {
    pub text: String,
    pub resolved_count: usize,
}

impl EnhancedContext {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }
}

/// Header line separating the original prompt from the enhanced context.
pub const CONTEXT_HEADER: &str = "Clarifying context:";

/// The original prompt together with the context built for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisambiguatedPrompt {
    pub original: String,
    pub enhanced: EnhancedContext,
    pub final_text: String,
}

impl DisambiguatedPrompt {
    /// Composes the final prompt: the original verbatim, then (if any
    /// context exists) a blank line, the header, and the context.
    pub fn compose(original: impl Into<String>, enhanced: EnhancedContext) -> Self {
        let original = original.into();
        let final_text = if enhanced.is_empty() {
            original.clone()
        } else {
            format!("{original}\n\n{CONTEXT_HEADER}\n{}", enhanced.text)
        };
        DisambiguatedPrompt { original, enhanced, final_text }
    }
}
