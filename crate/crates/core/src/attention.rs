//! Attention diagnostics over exported attention rows.
//!
//! An [`AttentionExport`] holds, for a few designated query tokens, the
//! normalized causal attention row of every layer and head. From it we
//! compute the focus ratio (attention mass on a target token set), the
//! Shannon entropy of each row, per-layer focus curves, and how attention
//! mass moves between token categories when a prompt is rewritten.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the sum of a normalized attention row.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;
/// Stability constant inside the entropy logarithm.
pub const DEFAULT_EPSILON: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("index {index} out of range for row of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("row sums to {sum}, not 1")]
    UnnormalizedRow { sum: f64 },
    #[error("category map covers {got} tokens, export has {expected}")]
    CategoryMapIncomplete { expected: usize, got: usize },
    #[error("invalid attention export: {0}")]
    InvalidExport(String),
    #[error("cannot read attention export: {0}")]
    Io(String),
}

fn check_normalized(row: &[f64]) -> Result<(), AttentionError> {
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE || !sum.is_finite() {
        return Err(AttentionError::UnnormalizedRow { sum });
    }
    Ok(())
}

/// Attention mass a row places on `targets`.
pub fn focus_ratio(row: &[f64], targets: &BTreeSet<usize>) -> Result<f64, AttentionError> {
    check_normalized(row)?;
    let mut total = 0.0;
    for &i in targets {
        total += *row.get(i).ok_or(AttentionError::IndexOutOfRange { index: i, len: row.len() })?;
    }
    Ok(total)
}

/// `-sum(a * ln(a + epsilon))` over the row. Zero weights contribute zero.
pub fn shannon_entropy(row: &[f64], epsilon: f64) -> Result<f64, AttentionError> {
    check_normalized(row)?;
    Ok(-row.iter().map(|&a| a * (a + epsilon).ln()).sum::<f64>())
}

/// [`shannon_entropy`] expressed in another logarithm base.
pub fn shannon_entropy_in_base(row: &[f64], epsilon: f64, base: f64) -> Result<f64, AttentionError> {
    Ok(shannon_entropy(row, epsilon)? / base.ln())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportToken {
    pub text: String,
    pub start_char: usize,
    pub end_char: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    Full,
    Mean,
}

/// Attention rows for designated query tokens, as written by an extractor.
///
/// `weights[layer][head][q]` is the row of query token `query_positions[q]`
/// and has exactly `query_positions[q] + 1` entries (the causal prefix,
/// including the query token itself).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub model: String,
    pub prompt: String,
    pub tokens: Vec<ExportToken>,
    pub query_positions: Vec<usize>,
    pub layers: usize,
    pub heads: usize,
    pub head_mode: HeadMode,
    pub weights: Vec<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

/// One attention row with its coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Row<'a> {
    pub layer: usize,
    pub head: usize,
    pub query: usize,
    pub weights: &'a [f64],
}

impl AttentionExport {
    pub fn load(path: &Path) -> Result<Self, AttentionError> {
        let raw = std::fs::read_to_string(path).map_err(|e| AttentionError::Io(format!("{}: {e}", path.display())))?;
        let export: AttentionExport =
            serde_json::from_str(&raw).map_err(|e| AttentionError::InvalidExport(e.to_string()))?;
        export.validate()?;
        Ok(export)
    }

    pub fn validate(&self) -> Result<(), AttentionError> {
        let bad = |msg: String| Err(AttentionError::InvalidExport(msg));
        if self.head_mode == HeadMode::Mean && self.heads != 1 {
            return bad(format!("mean head mode needs heads = 1, got {}", self.heads));
        }
        let prompt: Vec<char> = self.prompt.chars().collect();
        let mut cursor = 0;
        for (i, t) in self.tokens.iter().enumerate() {
            if t.start_char > t.end_char || t.start_char < cursor || t.end_char > prompt.len() {
                return bad(format!("token {i} span {}..{} is out of order or range", t.start_char, t.end_char));
            }
            if t.start_char < t.end_char {
                let slice: String = prompt[t.start_char..t.end_char].iter().collect();
                if slice != t.text {
                    return bad(format!("token {i} text {:?} does not match prompt {slice:?}", t.text));
                }
            }
            cursor = t.end_char;
        }
        if let Some(&q) = self.query_positions.iter().find(|&&q| q >= self.tokens.len()) {
            return bad(format!("query position {q} outside {} tokens", self.tokens.len()));
        }
        if self.weights.len() != self.layers {
            return bad(format!("expected {} layers, found {}", self.layers, self.weights.len()));
        }
        for (l, layer) in self.weights.iter().enumerate() {
            if layer.len() != self.heads {
                return bad(format!("layer {l}: expected {} heads, found {}", self.heads, layer.len()));
            }
            for (h, head) in layer.iter().enumerate() {
                if head.len() != self.query_positions.len() {
                    return bad(format!("layer {l} head {h}: expected {} rows", self.query_positions.len()));
                }
                for (qi, row) in head.iter().enumerate() {
                    let want = self.query_positions[qi] + 1;
                    if row.len() != want {
                        return bad(format!("layer {l} head {h} row {qi}: length {} != {want}", row.len()));
                    }
                    if row.iter().any(|w| !(0.0..=1.0).contains(w)) {
                        return bad(format!("layer {l} head {h} row {qi}: weight outside [0, 1]"));
                    }
                    check_normalized(row)?;
                }
            }
        }
        Ok(())
    }

    /// All rows in (layer, head, query) order.
    pub fn rows(&self) -> impl Iterator<Item = Row<'_>> {
        self.weights.iter().enumerate().flat_map(|(layer, heads)| {
            heads.iter().enumerate().flat_map(move |(head, rows)| {
                rows.iter().enumerate().map(move |(query, w)| Row { layer, head, query, weights: w.as_slice() })
            })
        })
    }

    /// Indices of tokens whose char span overlaps any of `spans`.
    pub fn tokens_overlapping(&self, spans: &[(usize, usize)]) -> BTreeSet<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| spans.iter().any(|&(s, e)| t.start_char < e && s < t.end_char))
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenCategory {
    Sink,
    Neutral,
    Target,
    Other,
}

impl TokenCategory {
    pub const ALL: [TokenCategory; 4] =
        [TokenCategory::Sink, TokenCategory::Neutral, TokenCategory::Target, TokenCategory::Other];

    pub fn name(self) -> &'static str {
        match self {
            TokenCategory::Sink => "sink",
            TokenCategory::Neutral => "neutral",
            TokenCategory::Target => "target",
            TokenCategory::Other => "other",
        }
    }
}

/// Target token set plus a category for every token of one export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FocusSpec {
    pub target_indices: BTreeSet<usize>,
    pub category_map: Vec<TokenCategory>,
}

const STOPWORDS: &[&str] = &[
    "a", "about", "after", "all", "also", "an", "and", "any", "are", "as", "at", "be", "been", "but", "by", "can",
    "do", "does", "for", "from", "had", "has", "have", "he", "her", "his", "how", "i", "if", "in", "into", "is", "it",
    "its", "let", "many", "more", "much", "no", "not", "of", "on", "or", "our", "she", "so", "some", "than", "that",
    "the", "their", "them", "then", "there", "these", "they", "this", "those", "to", "us", "was", "we", "were", "what",
    "when", "where", "which", "who", "will", "with", "would", "you",
];

fn is_begin_marker(token: &ExportToken) -> bool {
    token.start_char == token.end_char
        && matches!(token.text.as_str(), "<|begin_of_text|>" | "<s>" | "<bos>" | "<|endoftext|>" | "[CLS]")
}

fn is_neutral(token: &ExportToken) -> bool {
    let word = token.text.trim().to_lowercase();
    let word = word.trim_matches(|c: char| !c.is_alphanumeric());
    word.is_empty() || STOPWORDS.contains(&word)
}

impl FocusSpec {
    /// Categorizes tokens: a leading begin-of-text marker is the sink,
    /// `targets` are targets, stopwords and pure punctuation are neutral,
    /// everything else is other.
    pub fn categorize(export: &AttentionExport, targets: BTreeSet<usize>) -> Self {
        let category_map = export
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == 0 && is_begin_marker(t) {
                    TokenCategory::Sink
                } else if targets.contains(&i) {
                    TokenCategory::Target
                } else if is_neutral(t) {
                    TokenCategory::Neutral
                } else {
                    TokenCategory::Other
                }
            })
            .collect();
        FocusSpec { target_indices: targets, category_map }
    }

    pub fn validate_for(&self, export: &AttentionExport) -> Result<(), AttentionError> {
        if self.category_map.len() != export.tokens.len() {
            return Err(AttentionError::CategoryMapIncomplete {
                expected: export.tokens.len(),
                got: self.category_map.len(),
            });
        }
        if let Some(&i) =
            self.target_indices.iter().find(|&&i| self.category_map.get(i) != Some(&TokenCategory::Target))
        {
            return Err(AttentionError::InvalidExport(format!("target index {i} is not categorized as target")));
        }
        Ok(())
    }
}

/// Targets inside the causal prefix of `row`; later tokens have no weight.
fn targets_in_row(targets: &BTreeSet<usize>, row_len: usize) -> BTreeSet<usize> {
    targets.range(..row_len).copied().collect()
}

/// Mean focus ratio per layer, over every head and query row.
pub fn layerwise_focus_curve(export: &AttentionExport, spec: &FocusSpec) -> Result<Vec<(usize, f64)>, AttentionError> {
    let mut sums = vec![(0.0, 0usize); export.layers];
    for row in export.rows() {
        let f = focus_ratio(row.weights, &targets_in_row(&spec.target_indices, row.weights.len()))?;
        sums[row.layer].0 += f;
        sums[row.layer].1 += 1;
    }
    Ok(sums.into_iter().enumerate().map(|(l, (s, n))| (l, if n == 0 { 0.0 } else { s / n as f64 })).collect())
}

/// One `(entropy, focus)` point per row, in (layer, head, query) order.
pub fn entropy_focus_distribution(
    export: &AttentionExport,
    spec: &FocusSpec,
    epsilon: f64,
) -> Result<Vec<(f64, f64)>, AttentionError> {
    export
        .rows()
        .map(|row| {
            let h = shannon_entropy(row.weights, epsilon)?;
            let f = focus_ratio(row.weights, &targets_in_row(&spec.target_indices, row.weights.len()))?;
            Ok((h, f))
        })
        .collect()
}

/// Mean share of each row's mass per category. Rows are rescaled to sum to
/// exactly 1 first, so the shares of one export sum to 1.
pub fn category_masses(
    export: &AttentionExport,
    spec: &FocusSpec,
) -> Result<BTreeMap<TokenCategory, f64>, AttentionError> {
    spec.validate_for(export)?;
    let mut mass: BTreeMap<TokenCategory, f64> = TokenCategory::ALL.iter().map(|c| (*c, 0.0)).collect();
    let mut n = 0usize;
    for row in export.rows() {
        check_normalized(row.weights)?;
        let total: f64 = row.weights.iter().sum();
        for (i, w) in row.weights.iter().enumerate() {
            *mass.get_mut(&spec.category_map[i]).expect("all categories present") += w / total;
        }
        n += 1;
    }
    if n > 0 {
        mass.values_mut().for_each(|m| *m /= n as f64);
    }
    Ok(mass)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reallocation {
    pub mass_base: f64,
    pub mass_optimized: f64,
    pub delta: f64,
}

/// Per-category attention mass of two exports and the change between them.
pub fn category_reallocation(
    base: &AttentionExport,
    base_spec: &FocusSpec,
    optimized: &AttentionExport,
    optimized_spec: &FocusSpec,
) -> Result<BTreeMap<TokenCategory, Reallocation>, AttentionError> {
    let b = category_masses(base, base_spec)?;
    let o = category_masses(optimized, optimized_spec)?;
    Ok(TokenCategory::ALL
        .iter()
        .map(|c| {
            let (mb, mo) = (b[c], o[c]);
            (*c, Reallocation { mass_base: mb, mass_optimized: mo, delta: mo - mb })
        })
        .collect())
}
