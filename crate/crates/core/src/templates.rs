//! Prompt templates for every model call the pipeline makes, and the parser
//! for the risk-identification reply.
//!
//! Template bodies are kept verbatim; the only addition is a one-line output
//! contract appended to the risk-identification prompt so its reply can be
//! parsed. The same texts are exported under `templates/` at the workspace
//! root.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{validate_risk_point, RiskPoint, RiskType};

pub const L1_RISK_IDENTIFY: &str = "\
You are given a user question.
Your task is to identify spans or phrases that may introduce semantic ambiguity, underspecified references, or logical uncertainty that could affect reasoning stability.
Do NOT attempt to answer the question.
Do NOT resolve the ambiguity.
For each identified risk point, output:
(1) the exact text span, and
(2) a brief description of the type of semantic risk (referential ambiguity, missing assumption, temporal ambiguity).
User Question:
{Input Prompt}";

/// Appended to the rendered risk-identification prompt.
pub const L1_OUTPUT_FOOTER: &str = "Output one risk point per line as: SPAN: <exact span> || TYPE: <risk type>.";

pub const L2_INTERPRET: &str = "\
You are given a user question and a specific semantic risk point extracted from it.
Your task is to provide ONE plausible interpretation that clarifies the meaning of the risk point in the context of the question.
Focus only on explaining the risk point.
Do NOT solve the entire problem.
User Question:
{Input Prompt}
Semantic Risk Point:
{Risk Span}";

pub const L2_RESOLVE: &str = "\
You are given a user question and two different interpretations of the same semantic risk point.
Your task is to produce a single, self-consistent explanation that resolves the semantic conflict between the two interpretations, based on your explanation of the original question, and ensure logical consistency.
User Question:
{Input Prompt}
Interpretation 1:
{Interpretation 1}
Interpretation 2:
{Interpretation 2}";

pub const L3_AGGREGATE: &str = "\
You are given a user question and a list of resolved semantic clarifications.
Your task is to integrate these clarifications into a concise and structured supplemental context that improves semantic clarity for downstream reasoning.
Do NOT answer the question.
Do NOT introduce new assumptions.
User Question:
{Input Prompt}
Resolved Clarifications:
{Resolved Explanations}";

pub const AUGMENT: &str = "\
Instruction:
Rewrite the following question to make it slightly more semantically ambiguous, while keeping it logically solvable.
You may introduce ambiguity by:
\u{2022} using unclear or underspecified references (e.g., pronouns or vague entities),
\u{2022} omitting minor contextual details, or
\u{2022} introducing mild logical uncertainty that requires inference.
Do NOT change the underlying correct answer.
The rewritten question should remain natural, fluent, and answerable by careful reasoning.
Only output the rewritten question.
Original Question:
{Q}";

pub const INPUT_PROMPT: &str = "Input Prompt";
pub const RISK_SPAN: &str = "Risk Span";
pub const INTERPRETATION_1: &str = "Interpretation 1";
pub const INTERPRETATION_2: &str = "Interpretation 2";
pub const RESOLVED_EXPLANATIONS: &str = "Resolved Explanations";
pub const QUESTION: &str = "Q";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TemplateId {
    L1RiskIdentify,
    L2Interpret,
    L2Resolve,
    L3Aggregate,
    Augment,
}

impl TemplateId {
    pub const ALL: [TemplateId; 5] = [
        TemplateId::L1RiskIdentify,
        TemplateId::L2Interpret,
        TemplateId::L2Resolve,
        TemplateId::L3Aggregate,
        TemplateId::Augment,
    ];

    pub fn body(self) -> &'static str {
        match self {
            TemplateId::L1RiskIdentify => L1_RISK_IDENTIFY,
            TemplateId::L2Interpret => L2_INTERPRET,
            TemplateId::L2Resolve => L2_RESOLVE,
            TemplateId::L3Aggregate => L3_AGGREGATE,
            TemplateId::Augment => AUGMENT,
        }
    }

    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateId::L1RiskIdentify => &[INPUT_PROMPT],
            TemplateId::L2Interpret => &[INPUT_PROMPT, RISK_SPAN],
            TemplateId::L2Resolve => &[INPUT_PROMPT, INTERPRETATION_1, INTERPRETATION_2],
            TemplateId::L3Aggregate => &[INPUT_PROMPT, RESOLVED_EXPLANATIONS],
            TemplateId::Augment => &[QUESTION],
        }
    }

    /// File name under the exported `templates/` directory.
    pub fn file_name(self) -> &'static str {
        match self {
            TemplateId::L1RiskIdentify => "l1_risk_identify.txt",
            TemplateId::L2Interpret => "l2_interpret.txt",
            TemplateId::L2Resolve => "l2_resolve.txt",
            TemplateId::L3Aggregate => "l3_aggregate.txt",
            TemplateId::Augment => "augment.txt",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("missing binding for placeholder {{{0}}}")]
    MissingPlaceholder(String),
    #[error("template does not declare placeholder {{{0}}}")]
    UnknownPlaceholder(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RenderedPrompt {
    pub template: TemplateId,
    pub text: String,
    /// (placeholder, length in chars of the substituted value)
    pub placeholders_filled: Vec<(String, usize)>,
}

/// Substitutes `bindings` into the template in a single pass.
///
/// Bound values are inserted literally, so a value that itself contains
/// `{...}` is never re-expanded.
pub fn render(template: TemplateId, bindings: &BTreeMap<&str, &str>) -> Result<RenderedPrompt, TemplateError> {
    let declared = template.placeholders();
    if let Some(unknown) = bindings.keys().find(|k| !declared.contains(k)) {
        return Err(TemplateError::UnknownPlaceholder(unknown.to_string()));
    }
    if let Some(missing) = declared.iter().find(|p| !bindings.contains_key(*p)) {
        return Err(TemplateError::MissingPlaceholder(missing.to_string()));
    }

    let body = template.body();
    let mut text = String::with_capacity(body.len() + bindings.values().map(|v| v.len()).sum::<usize>());
    let mut filled = Vec::new();
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        let Some(close) = rest[open..].find('}').map(|c| open + c) else {
            break;
        };
        let name = &rest[open + 1..close];
        text.push_str(&rest[..open]);
        match bindings.get(name) {
            Some(value) => {
                text.push_str(value);
                filled.push((name.to_string(), value.chars().count()));
            }
            None => text.push_str(&rest[open..=close]),
        }
        rest = &rest[close + 1..];
    }
    text.push_str(rest);

    if template == TemplateId::L1RiskIdentify {
        text.push('\n');
        text.push_str(L1_OUTPUT_FOOTER);
    }
    Ok(RenderedPrompt { template, text, placeholders_filled: filled })
}

/// Formats clarifications as `1. ...\n2. ...`.
pub fn numbered_list<S: AsRef<str>>(items: &[S]) -> String {
    items.iter().enumerate().map(|(i, s)| format!("{}. {}", i + 1, s.as_ref())).collect::<Vec<_>>().join("\n")
}

/// Default cap on risk points kept from one identification reply.
pub const DEFAULT_MAX_POINTS: usize = 4;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ParseReport {
    /// Lines that produced a risk point (before truncation).
    pub accepted: usize,
    /// Lines mentioning `SPAN:` that could not be parsed.
    pub skipped: usize,
    /// Accepted points dropped by the `max_points` cap.
    pub truncated: usize,
}

/// Parses `SPAN: <text> || TYPE: <label>` lines into located risk points.
///
/// Other lines are ignored. An empty result is a valid "no risks" answer.
pub fn parse_risk_points(l1_output: &str, prompt: &str, max_points: usize) -> Vec<RiskPoint> {
    parse_risk_points_with_report(l1_output, prompt, max_points).0
}

pub fn parse_risk_points_with_report(
    l1_output: &str,
    prompt: &str,
    max_points: usize,
) -> (Vec<RiskPoint>, ParseReport) {
    let mut report = ParseReport::default();
    let mut points = Vec::new();
    for line in l1_output.lines() {
        let Some(after) = find_ci(line, "SPAN:").map(|i| &line[i + "SPAN:".len()..]) else {
            continue;
        };
        match parse_line(after, prompt) {
            Some(point) => {
                report.accepted += 1;
                if points.len() < max_points {
                    points.push(point);
                } else {
                    report.truncated += 1;
                }
            }
            None => report.skipped += 1,
        }
    }
    (points, report)
}

fn parse_line(after_span: &str, prompt: &str) -> Option<RiskPoint> {
    let sep = after_span.rfind("||")?;
    let span = after_span[..sep].trim();
    let type_part = after_span[sep + 2..].trim_start();
    let label = find_ci(type_part, "TYPE:").filter(|&i| i == 0).map(|_| &type_part["TYPE:".len()..])?;
    let risk_type = RiskType::from_label(label).ok()?;
    let span = unquote(span, prompt);
    validate_risk_point(RiskPoint::candidate(span, risk_type), prompt).ok()
}

/// Drops one pair of surrounding quotes, unless the quoted form is itself
/// present in the prompt.
fn unquote<'a>(span: &'a str, prompt: &str) -> &'a str {
    const PAIRS: [(char, char); 5] =
        [('"', '"'), ('\'', '\''), ('`', '`'), ('\u{201c}', '\u{201d}'), ('\u{2018}', '\u{2019}')];
    for (open, close) in PAIRS {
        if let Some(inner) = span.strip_prefix(open).and_then(|s| s.strip_suffix(close)) {
            if !inner.trim().is_empty() && !prompt.to_lowercase().contains(&span.to_lowercase()) {
                return inner;
            }
        }
    }
    span
}

fn find_ci(hay: &str, needle: &str) -> Option<usize> {
    hay.char_indices().map(|(i, _)| i).find(|&i| {
        hay[i..].len() >= needle.len()
            && hay.is_char_boundary(i + needle.len())
            && hay[i..i + needle.len()].eq_ignore_ascii_case(needle)
    })
}

/// Serializes risk points in the identification wire format.
pub fn format_risk_points(points: &[RiskPoint]) -> String {
    points.iter().map(|p| format!("SPAN: {} || TYPE: {}", p.span, p.risk_type.label())).collect::<Vec<_>>().join("\n")
}
