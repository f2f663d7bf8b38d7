//! Benchmark runs against a target model, with stability metrics.
//!
//! Each item is asked `k` times with consecutive seeds. From the normalized
//! answers we report single-sample accuracy (sample 0), majority-vote
//! accuracy, and the disagreement rate: the fraction of items whose `k`
//! answers are not all identical.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use futures::stream::{self, StreamExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::client::{chat, ChatRequest, ClientError, Message, ModelBackend, SharedBackend, UsageLedger, UsageRole};
use crate::pipeline::{Disambiguator, PipelineError};
use crate::templates::{render, TemplateError, TemplateId, QUESTION};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("benchmark file not found: {0}")]
    FileNotFound(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed benchmark line {line_no}: {reason}")]
    MalformedLine { line_no: usize, reason: String },
    #[error("duplicate item id `{0}`")]
    DuplicateId(String),
    #[error("rewriter returned an empty question for item `{0}`")]
    RewriteEmpty(String),
    #[error("invalid eval options: {0}")]
    InvalidOptions(String),
    #[error("no item could be scored ({0} errored)")]
    NoScoredItems(usize),
    #[error("optimize arm requested without a pipeline")]
    MissingPipeline,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub id: String,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
}

/// Reads a JSON-Lines benchmark. Blank lines are ignored.
pub fn load_benchmark(path: &Path) -> Result<Vec<BenchmarkItem>, EvalError> {
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => EvalError::FileNotFound(path.display().to_string()),
        _ => EvalError::Io(e),
    })?;
    let mut items = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let item: BenchmarkItem =
            serde_json::from_str(&line).map_err(|e| EvalError::MalformedLine { line_no, reason: e.to_string() })?;
        for (field, value) in [("id", &item.id), ("question", &item.question), ("answer", &item.answer)] {
            if value.trim().is_empty() {
                return Err(EvalError::MalformedLine { line_no, reason: format!("empty `{field}`") });
            }
        }
        if !seen.insert(item.id.clone()) {
            return Err(EvalError::DuplicateId(item.id));
        }
        items.push(item);
    }
    Ok(items)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), EvalError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut out, row).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Picks `limit` items at random (seeded), keeping their original order.
pub fn subsample(items: &[BenchmarkItem], limit: usize, seed: u64) -> Vec<BenchmarkItem> {
    if limit >= items.len() {
        return items.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, items.len(), limit).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| items[i].clone()).collect()
}

const ARTICLES: [&str; 3] = ["a ", "an ", "the "];
const TERMINAL_PUNCT: &[char] = &['.', ',', '!', '?', ';', ':'];

fn strip_articles(mut s: &str) -> &str {
    'outer: loop {
        for article in ARTICLES {
            if let Some(rest) = s.strip_prefix(article) {
                let rest = rest.trim_start();
                if !rest.is_empty() {
                    s = rest;
                    continue 'outer;
                }
            }
        }
        return s;
    }
}

fn canonical(s: &str) -> String {
    let lower = s.to_lowercase();
    let collapsed = lower.split_whitespace().collect::<Vec<_>>().join(" ");
    let unpunct = collapsed.trim_end_matches(|c: char| TERMINAL_PUNCT.contains(&c) || c.is_whitespace());
    strip_articles(unpunct).to_string()
}

/// Canonical form of a model answer, for exact-match scoring.
///
/// If some line reads `Answer: ...` (optionally after an article), only the
/// text after the last such line's colon is kept. The result is lowercased,
/// whitespace-collapsed, stripped of trailing `.,!?;:` and of leading articles.
pub fn normalize_answer(raw: &str) -> String {
    let answer_line = raw.lines().rev().find_map(|line| {
        let lower = line.trim().to_lowercase();
        let lower = strip_articles(&lower).to_string();
        lower.strip_prefix("answer:").map(str::to_string)
    });
    canonical(answer_line.as_deref().unwrap_or(raw))
}

fn choice_letter(index: usize) -> String {
    char::from(b'a' + (index % 26) as u8).to_string()
}

/// Normalized strings that count as a correct answer for `item`.
///
/// For multiple-choice items the gold answer's choice letter and choice text
/// are both accepted.
pub fn accepted_answers(item: &BenchmarkItem) -> HashSet<String> {
    let gold = normalize_answer(&item.answer);
    let mut accepted = HashSet::from([gold.clone()]);
    if let Some(choices) = &item.choices {
        for (i, choice) in choices.iter().enumerate() {
            let text = normalize_answer(choice);
            let letter = choice_letter(i);
            if text == gold || letter == gold {
                accepted.insert(text);
                accepted.insert(letter);
            }
        }
    }
    accepted
}

/// Most frequent answer; ties go to the lexicographically smallest.
pub fn majority_vote(answers: &[String]) -> Option<&str> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for a in answers {
        *counts.entry(a.as_str()).or_default() += 1;
    }
    // BTreeMap iterates in ascending order; max_by_key keeps the last max, so reverse
    counts.into_iter().rev().max_by_key(|(_, n)| *n).map(|(a, _)| a)
}

pub const TARGET_SYSTEM_PROMPT: &str =
    "Answer the question. End your response with a final line of the form \"Answer: <answer>\".";

/// The user message sent to the target model for `item`.
pub fn target_message(question_text: &str, item: &BenchmarkItem) -> String {
    match &item.choices {
        Some(choices) if !choices.is_empty() => {
            let mut text = format!("{question_text}\n\nChoices:");
            for (i, c) in choices.iter().enumerate() {
                let _ = write!(text, "\n{}. {c}", choice_letter(i).to_uppercase());
            }
            text
        }
        _ => question_text.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub optimize: bool,
    /// Samples per item.
    pub k: usize,
    pub base_seed: i64,
    pub temperature: f64,
    /// Items evaluated concurrently.
    pub parallelism: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { optimize: false, k: 5, base_seed: 2025, temperature: 0.2, parallelism: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRunRecord {
    pub item_id: String,
    /// What was sent as the question: the disambiguated prompt or the original.
    pub final_prompt: String,
    pub samples: Vec<String>,
    pub normalized: Vec<String>,
    pub correct_flags: Vec<bool>,
    pub seeds_used: Vec<i64>,
    pub majority: String,
    pub majority_correct: bool,
}

impl EvalRunRecord {
    pub fn is_unanimous(&self) -> bool {
        self.normalized.windows(2).all(|w| w[0] == w[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub item_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc_at_1: f64,
    pub majority_acc: f64,
    pub disagreement_rate: f64,
    pub avg_optimizer_cost_usd: f64,
    /// Items scored (errored items excluded).
    pub n_items: usize,
    pub n_errored: usize,
    pub k: usize,
}

impl MetricsReport {
    /// Rates over `records`; cost is averaged over every attempted item.
    pub fn from_records(
        records: &[EvalRunRecord],
        n_errored: usize,
        optimizer_cost: f64,
        k: usize,
    ) -> Result<Self, EvalError> {
        let n = records.len();
        if n == 0 {
            return Err(EvalError::NoScoredItems(n_errored));
        }
        let count = |f: &dyn Fn(&EvalRunRecord) -> bool| records.iter().filter(|r| f(r)).count() as f64 / n as f64;
        Ok(MetricsReport {
            acc_at_1: count(&|r| r.correct_flags.first().copied().unwrap_or(false)),
            majority_acc: count(&|r| r.majority_correct),
            disagreement_rate: count(&|r| !r.is_unanimous()),
            avg_optimizer_cost_usd: optimizer_cost / (n + n_errored) as f64,
            n_items: n,
            n_errored,
            k,
        })
    }

    pub fn to_table(&self) -> String {
        let rows = [
            ("items", self.n_items.to_string()),
            ("errored", self.n_errored.to_string()),
            ("samples/item", self.k.to_string()),
            ("Acc@1", format!("{:.4}", self.acc_at_1)),
            ("majority acc", format!("{:.4}", self.majority_acc)),
            ("disagreement", format!("{:.4}", self.disagreement_rate)),
            ("avg cost ($)", format!("{:.6}", self.avg_optimizer_cost_usd)),
        ];
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.iter().map(|(k, v)| format!("{k:<width$}  {v:>12}\n")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub records: Vec<EvalRunRecord>,
    pub failures: Vec<ItemFailure>,
    pub report: MetricsReport,
}

enum ItemResult {
    Scored(EvalRunRecord),
    Errored(ItemFailure),
}

impl ItemResult {
    fn id(&self) -> &str {
        match self {
            ItemResult::Scored(r) => &r.item_id,
            ItemResult::Errored(f) => &f.item_id,
        }
    }
}

async fn eval_item(
    item: &BenchmarkItem,
    options: &EvalOptions,
    pipeline: Option<&Disambiguator>,
    target: &dyn ModelBackend,
    ledger: &UsageLedger,
) -> Result<ItemResult, EvalError> {
    let question = match (options.optimize, pipeline) {
        (true, Some(p)) => p.disambiguate(&item.question, ledger).await?.0.final_text,
        (true, None) => return Err(EvalError::MissingPipeline),
        (false, _) => item.question.clone(),
    };
    let message = target_message(&question, item);
    let accepted = accepted_answers(item);

    let mut samples = Vec::with_capacity(options.k);
    let mut seeds = Vec::with_capacity(options.k);
    for j in 0..options.k {
        let seed = options.base_seed + j as i64;
        let request = ChatRequest {
            messages: vec![Message::system(TARGET_SYSTEM_PROMPT), Message::user(message.clone())],
            temperature: options.temperature,
            seed: Some(seed),
            max_output_tokens: None,
        };
        match chat(target, &request, UsageRole::Target, ledger).await {
            Ok(resp) => samples.push(resp.text),
            Err(e) => {
                warn!(item = %item.id, sample = j, error = %e, "target call failed");
                return Ok(ItemResult::Errored(ItemFailure { item_id: item.id.clone(), message: e.to_string() }));
            }
        }
        seeds.push(seed);
    }

    let normalized: Vec<String> = samples.iter().map(|s| normalize_answer(s)).collect();
    let correct_flags = normalized.iter().map(|a| accepted.contains(a)).collect();
    let majority = majority_vote(&normalized).unwrap_or_default().to_string();
    Ok(ItemResult::Scored(EvalRunRecord {
        item_id: item.id.clone(),
        final_prompt: question,
        majority_correct: accepted.contains(&majority),
        majority,
        samples,
        normalized,
        correct_flags,
        seeds_used: seeds,
    }))
}

/// Evaluates `items` against `target`, optionally disambiguating each
/// question first. Records come back sorted by item id.
pub async fn run_eval(
    items: &[BenchmarkItem],
    options: &EvalOptions,
    pipeline: Option<&Disambiguator>,
    target: &SharedBackend,
    ledger: &UsageLedger,
) -> Result<EvalOutcome, EvalError> {
    if options.k == 0 {
        return Err(EvalError::InvalidOptions("k must be at least 1".into()));
    }
    if items.is_empty() {
        return Err(EvalError::InvalidOptions("no items".into()));
    }
    let local = UsageLedger::new();
    let results: Vec<Result<ItemResult, EvalError>> = stream::iter(items)
        .map(|item| eval_item(item, options, pipeline, target.as_ref(), &local))
        .buffer_unordered(options.parallelism.max(1))
        .collect()
        .await;
    let optimizer_cost = local.subtotal(UsageRole::Optimizer);
    ledger.absorb(&local);

    let mut results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    results.sort_by(|a, b| a.id().cmp(b.id()));
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            ItemResult::Scored(rec) => records.push(rec),
            ItemResult::Errored(f) => failures.push(f),
        }
    }
    let report = MetricsReport::from_records(&records, failures.len(), optimizer_cost, options.k)?;
    Ok(EvalOutcome { records, failures, report })
}

/// Mean and max-minus-min of one metric across repeated runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub spread: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Spread { mean, spread: if values.is_empty() { 0.0 } else { hi - lo } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub runs: usize,
    pub acc_at_1: Spread,
    pub majority_acc: Spread,
    pub disagreement_rate: Spread,
    pub avg_optimizer_cost_usd: Spread,
}

impl RepeatSummary {
    pub fn of(reports: &[MetricsReport]) -> Self {
        let pick = |f: fn(&MetricsReport) -> f64| Spread::of(&reports.iter().map(f).collect::<Vec<_>>());
        RepeatSummary {
            runs: reports.len(),
            acc_at_1: pick(|r| r.acc_at_1),
            majority_acc: pick(|r| r.majority_acc),
            disagreement_rate: pick(|r| r.disagreement_rate),
            avg_optimizer_cost_usd: pick(|r| r.avg_optimizer_cost_usd),
        }
    }
}

pub const AUGMENT_TEMPERATURE: f64 = 0.2;
pub const AUGMENT_SEED: i64 = 2025;

/// Rewrites the question into a more ambiguous variant with the same answer.
///
/// The rewriter is billed as a target call, since it is dataset preparation
/// and not part of the method's cost.
pub async fn augment_item(
    item: &BenchmarkItem,
    rewriter: &dyn ModelBackend,
    ledger: &UsageLedger,
) -> Result<BenchmarkItem, EvalError> {
    let rendered = render(TemplateId::Augment, &BTreeMap::from([(QUESTION, item.question.as_str())]))?;
    let request = ChatRequest::user(rendered.text, AUGMENT_TEMPERATURE, Some(AUGMENT_SEED));
    let rewrite = chat(rewriter, &request, UsageRole::Target, ledger).await?.text;
    let rewrite = rewrite.trim();
    if rewrite.is_empty() {
        return Err(EvalError::RewriteEmpty(item.id.clone()));
    }
    Ok(BenchmarkItem {
        id: format!("{}-amb", item.id),
        question: rewrite.to_string(),
        answer: item.answer.clone(),
        choices: item.choices.clone(),
    })
}
