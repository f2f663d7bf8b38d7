//! The `disambig` command-line tool.
//!
//! Exit codes: 0 on success, 1 on any operational error, 2 when the command
//! finished but some items could not be processed.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::attention::{
    category_reallocation, entropy_focus_distribution, layerwise_focus_curve, shannon_entropy_in_base, AttentionExport,
    FocusSpec, DEFAULT_EPSILON,
};
use crate::client::{BackendConfig, HttpBackend, ScriptFile, ScriptedBackend, SharedBackend, UsageLedger, UsageRole};
use crate::eval::{
    augment_item, load_benchmark, run_eval, subsample, write_jsonl, EvalError, EvalOptions, RepeatSummary,
};
use crate::model::DisambiguatedPrompt;
use crate::pipeline::{Ablation, Disambiguator, PipelineConfig, PipelineTrace};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Openai,
    Scripted,
}

/// One `[section]` of the config file describing a model endpoint.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    #[serde(default)]
    pub kind: BackendKind,
    #[serde(default)]
    pub base_url: String,
    /// Environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: String,
    pub model: String,
    #[serde(default)]
    pub price_in_per_1k: f64,
    #[serde(default)]
    pub price_out_per_1k: f64,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Script file for `kind = "scripted"`, relative to the config file.
    #[serde(default)]
    pub script: Option<PathBuf>,
}

fn default_timeout_secs() -> u64 {
    60
}

fn default_max_retries() -> u32 {
    3
}

impl BackendSection {
    pub fn backend_config(&self) -> BackendConfig {
        BackendConfig {
            base_url: self.base_url.clone(),
            api_key_env_var: self.api_key_env.clone(),
            model: self.model.clone(),
            price_in_per_1k: self.price_in_per_1k,
            price_out_per_1k: self.price_out_per_1k,
            timeout: Duration::from_secs(self.timeout_secs),
            max_retries: self.max_retries,
        }
    }

    pub fn build(&self, base_dir: &Path) -> Result<SharedBackend> {
        let config = self.backend_config();
        config.validate()?;
        Ok(match self.kind {
            BackendKind::Openai => {
                if config.base_url.is_empty() {
                    bail!("backend `{}` needs a base_url", config.model);
                }
                Arc::new(HttpBackend::new(config)?)
            }
            BackendKind::Scripted => {
                let rel = self.script.as_ref().context("scripted backend needs a `script` path")?;
                let script = ScriptFile::load(&base_dir.join(rel))?;
                Arc::new(ScriptedBackend::from_script(config, script))
            }
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub k: usize,
    pub base_seed: i64,
    pub parallelism: usize,
    pub temperature: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = EvalOptions::default();
        EvalSection { k: d.k, base_seed: d.base_seed, parallelism: d.parallelism, temperature: d.temperature }
    }
}

/// Parsed TOML config. API keys are never stored here, only the names of
/// the environment variables that hold them.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    pub slm: Option<BackendSection>,
    /// Optional distinct model for the second reading channel.
    pub slm_second: Option<BackendSection>,
    pub embed: Option<BackendSection>,
    pub target: Option<BackendSection>,
    pub rewriter: Option<BackendSection>,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut config: AppConfig =
            toml::from_str(&raw).with_context(|| format!("invalid config {}", path.display()))?;
        config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        config.pipeline.validate()?;
        Ok(config)
    }

    fn backend(&self, section: &Option<BackendSection>, name: &str) -> Result<SharedBackend> {
        section
            .as_ref()
            .with_context(|| format!("config has no [{name}] section"))?
            .build(&self.base_dir)
            .with_context(|| format!("cannot build [{name}] backend"))
    }

    pub fn disambiguator(&self, ablation: Option<Ablation>) -> Result<Disambiguator> {
        let mut pipeline = self.pipeline.clone();
        if let Some(a) = ablation {
            pipeline.ablation = a;
        }
        let mut d = Disambiguator::new(pipeline, self.backend(&self.slm, "slm")?, self.backend(&self.embed, "embed")?)?;
        if self.slm_second.is_some() {
            d = d.with_second_slm(self.backend(&self.slm_second, "slm_second")?);
        }
        Ok(d)
    }
}

#[derive(Debug, Parser)]
#[command(name = "disambig", version, about = "Prompt disambiguation, evaluation and attention diagnostics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the disambiguated form of a prompt.
    Disambiguate(DisambiguateArgs),
    /// Evaluate a JSON-Lines benchmark against the target model.
    Eval(EvalArgs),
    /// Rewrite benchmark questions into more ambiguous variants.
    Augment(AugmentArgs),
    /// Attention export analysis.
    #[command(subcommand)]
    Attn(AttnCommand),
}

#[derive(Debug, Args)]
pub struct DisambiguateArgs {
    #[arg(long, conflicts_with = "prompt_file", required_unless_present = "prompt_file")]
    pub prompt: Option<String>,
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
    #[arg(long)]
    pub config: PathBuf,
    /// Write the pipeline trace as JSON.
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    /// Override the configured ablation (full, no_l2_l3, single_channel, no_conflict_resolution, no_l3).
    #[arg(long)]
    pub ablation: Option<Ablation>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub bench: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for report.json, report.txt and records.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    /// Disambiguate each question before asking the target.
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    pub optimize: bool,
    #[arg(long)]
    pub ablation: Option<Ablation>,
    /// Evaluate a seeded random subsample of this many items.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 2025)]
    pub sample_seed: u64,
    /// Repeat the whole run and report mean and spread.
    #[arg(long, default_value_t = 1)]
    pub repeat: usize,
    #[arg(long)]
    pub parallelism: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub bench: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Augmented JSON-Lines output.
    #[arg(long, alias = "augment-out")]
    pub out: PathBuf,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 2025)]
    pub sample_seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum AttnCommand {
    /// Compare a base and an optimized export; writes CSV files.
    Compare(CompareArgs),
    /// Check that an export file is well formed.
    Validate { path: PathBuf },
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub optimized: PathBuf,
    /// JSON file: {"terms": [...], "spans": [[start, end], ...]}.
    #[arg(long)]
    pub targets: Option<PathBuf>,
    /// Target term, matched at every occurrence in each prompt.
    #[arg(long = "target-term")]
    pub target_terms: Vec<String>,
    /// Target char span `start:end`, applied to both prompts.
    #[arg(long = "target-span", value_parser = parse_span)]
    pub target_spans: Vec<(usize, usize)>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Logarithm base for entropy.
    #[arg(long, default_value_t = std::f64::consts::E)]
    pub log_base: f64,
}

fn parse_span(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or("expected start:end")?;
    let (a, b): (usize, usize) = (a.parse().map_err(|_| "bad start")?, b.parse().map_err(|_| "bad end")?);
    if a >= b {
        return Err("start must be below end".into());
    }
    Ok((a, b))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetsFile {
    #[serde(default)]
    pub terms: Vec<String>,
    #[serde(default)]
    pub spans: Vec<(usize, usize)>,
}

/// Outcome of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Completion {
    Clean,
    Partial,
}

#[derive(Serialize)]
struct TraceDocument<'a> {
    disambiguated: &'a DisambiguatedPrompt,
    trace: &'a PipelineTrace,
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("DISAMBIG_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::from(1);
        }
    };
    match runtime.block_on(run(cli)) {
        Ok(Completion::Clean) => ExitCode::SUCCESS,
        Ok(Completion::Partial) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

pub async fn run(cli: Cli) -> Result<Completion> {
    match cli.command {
        Command::Disambiguate(args) => cmd_disambiguate(args).await,
        Command::Eval(args) => cmd_eval(args).await,
        Command::Augment(args) => cmd_augment(args).await,
        Command::Attn(AttnCommand::Compare(args)) => cmd_attn_compare(args),
        Command::Attn(AttnCommand::Validate { path }) => {
            let export = AttentionExport::load(&path)?;
            println!(
                "ok: {} layers x {} heads x {} queries, {} tokens",
                export.layers,
                export.heads,
                export.query_positions.len(),
                export.tokens.len()
            );
            Ok(Completion::Clean)
        }
    }
}

pub async fn cmd_disambiguate(args: DisambiguateArgs) -> Result<Completion> {
    let prompt = match (&args.prompt, &args.prompt_file) {
        (Some(p), _) => p.clone(),
        (None, Some(path)) => {
            std::fs::read_to_string(path).with_context(|| format!("cannot read prompt file {}", path.display()))?
        }
        (None, None) => bail!("either --prompt or --prompt-file is required"),
    };
    let config = AppConfig::load(&args.config)?;
    let pipeline = config.disambiguator(args.ablation)?;
    let ledger = UsageLedger::new();
    let (result, trace) = pipeline.disambiguate(&prompt, &ledger).await?;
    if let Some(path) = &args.trace_out {
        let doc = TraceDocument { disambiguated: &result, trace: &trace };
        std::fs::write(path, serde_json::to_string_pretty(&doc)?)
            .with_context(|| format!("cannot write trace {}", path.display()))?;
    }
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(result.final_text.as_bytes())?;
    if !result.final_text.ends_with('\n') {
        stdout.write_all(b"\n")?;
    }
    Ok(Completion::Clean)
}

pub async fn cmd_eval(args: EvalArgs) -> Result<Completion> {
    let config = AppConfig::load(&args.config)?;
    let mut items = load_benchmark(&args.bench)?;
    if let Some(limit) = args.limit {
        items = subsample(&items, limit, args.sample_seed);
    }
    let pipeline = if args.optimize { Some(config.disambiguator(args.ablation)?) } else { None };
    let target = config.backend(&config.target, "target")?;
    let options = EvalOptions {
        optimize: args.optimize,
        k: config.eval.k,
        base_seed: config.eval.base_seed,
        temperature: config.eval.temperature,
        parallelism: args.parallelism.unwrap_or(config.eval.parallelism),
    };
    if args.repeat == 0 {
        bail!("--repeat must be at least 1");
    }

    std::fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    let ledger = UsageLedger::new();
    let mut reports = Vec::new();
    let mut partial = false;
    for run_index in 0..args.repeat {
        let outcome = run_eval(&items, &options, pipeline.as_ref(), &target, &ledger).await?;
        let suffix = if args.repeat > 1 { format!("-run{}", run_index + 1) } else { String::new() };
        write_jsonl(&args.out.join(format!("records{suffix}.jsonl")), &outcome.records)?;
        if !outcome.failures.is_empty() {
            partial = true;
            write_jsonl(&args.out.join(format!("failures{suffix}.jsonl")), &outcome.failures)?;
            eprintln!("warning: {} item(s) errored and were excluded", outcome.failures.len());
        }
        std::fs::write(args.out.join(format!("report{suffix}.json")), serde_json::to_string_pretty(&outcome.report)?)?;
        let table =
            format!("arm: {}\n{}", if args.optimize { "optimized" } else { "naive" }, outcome.report.to_table());
        std::fs::write(args.out.join(format!("report{suffix}.txt")), &table)?;
        print!("{table}");
        reports.push(outcome.report);
    }
    if args.repeat > 1 {
        let summary = RepeatSummary::of(&reports);
        std::fs::write(args.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        println!(
            "over {} runs: Acc@1 {:.4} ± {:.4}, majority {:.4} ± {:.4}, disagreement {:.4} ± {:.4}",
            summary.runs,
            summary.acc_at_1.mean,
            summary.acc_at_1.spread,
            summary.majority_acc.mean,
            summary.majority_acc.spread,
            summary.disagreement_rate.mean,
            summary.disagreement_rate.spread
        );
    }
    println!(
        "usage: optimizer ${:.6}, target ${:.6}",
        ledger.subtotal(UsageRole::Optimizer),
        ledger.subtotal(UsageRole::Target)
    );
    Ok(if partial { Completion::Partial } else { Completion::Clean })
}

pub async fn cmd_augment(args: AugmentArgs) -> Result<Completion> {
    let config = AppConfig::load(&args.config)?;
    let mut items = load_benchmark(&args.bench)?;
    if let Some(limit) = args.limit {
        items = subsample(&items, limit, args.sample_seed);
    }
    let rewriter = config.backend(&config.rewriter, "rewriter")?;
    let ledger = UsageLedger::new();
    let mut augmented = Vec::with_capacity(items.len());
    let mut flagged = 0usize;
    for item in &items {
        match augment_item(item, rewriter.as_ref(), &ledger).await {
            Ok(a) => augmented.push(a),
            Err(EvalError::RewriteEmpty(id)) => {
                flagged += 1;
                eprintln!("warning: empty rewrite for item `{id}`; skipped");
            }
            Err(e) => return Err(e.into()),
        }
    }
    write_jsonl(&args.out, &augmented)?;
    println!("wrote {} augmented item(s) to {}", augmented.len(), args.out.display());
    Ok(if flagged > 0 { Completion::Partial } else { Completion::Clean })
}

fn term_spans(prompt: &str, term: &str) -> Vec<(usize, usize)> {
    if term.is_empty() {
        return Vec::new();
    }
    let len = term.chars().count();
    prompt
        .match_indices(term)
        .map(|(byte, _)| {
            let start = prompt[..byte].chars().count();
            (start, start + len)
        })
        .collect()
}

fn targets_for(export: &AttentionExport, terms: &[String], spans: &[(usize, usize)]) -> BTreeSet<usize> {
    let mut all: Vec<(usize, usize)> = spans.to_vec();
    for t in terms {
        all.extend(term_spans(&export.prompt, t));
    }
    export.tokens_overlapping(&all)
}

pub fn cmd_attn_compare(args: CompareArgs) -> Result<Completion> {
    let base = AttentionExport::load(&args.base).with_context(|| format!("base export {}", args.base.display()))?;
    let optimized = AttentionExport::load(&args.optimized)
        .with_context(|| format!("optimized export {}", args.optimized.display()))?;
    if base.layers != optimized.layers {
        bail!("exports have different layer counts ({} vs {})", base.layers, optimized.layers);
    }
    let mut targets = match &args.targets {
        Some(path) => serde_json::from_str::<TargetsFile>(
            &std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?,
        )
        .with_context(|| format!("invalid targets file {}", path.display()))?,
        None => TargetsFile::default(),
    };
    targets.terms.extend(args.target_terms.iter().cloned());
    targets.spans.extend(args.target_spans.iter().copied());
    if targets.terms.is_empty() && targets.spans.is_empty() {
        bail!("no targets given; use --targets, --target-term or --target-span");
    }

    let base_spec = FocusSpec::categorize(&base, targets_for(&base, &targets.terms, &targets.spans));
    let opt_spec = FocusSpec::categorize(&optimized, targets_for(&optimized, &targets.terms, &targets.spans));

    std::fs::create_dir_all(&args.out)?;
    let (curve_b, curve_o) = (layerwise_focus_curve(&base, &base_spec)?, layerwise_focus_curve(&optimized, &opt_spec)?);
    let mut csv = String::from("layer,focus_base,focus_optimized\n");
    for ((l, fb), (_, fo)) in curve_b.iter().zip(&curve_o) {
        writeln!(csv, "{l},{fb},{fo}")?;
    }
    std::fs::write(args.out.join("focus_by_layer.csv"), csv)?;

    let realloc = category_reallocation(&base, &base_spec, &optimized, &opt_spec)?;
    let mut csv = String::from("category,mass_base,mass_optimized,delta\n");
    for (cat, r) in &realloc {
        writeln!(csv, "{},{},{},{}", cat.name(), r.mass_base, r.mass_optimized, r.delta)?;
    }
    std::fs::write(args.out.join("categories.csv"), csv)?;

    let mut csv = String::from("export,layer,head,query_position,entropy,focus\n");
    for (name, export, spec) in [("base", &base, &base_spec), ("optimized", &optimized, &opt_spec)] {
        let points = entropy_focus_distribution(export, spec, args.epsilon)?;
        for (row, (_, focus)) in export.rows().zip(points) {
            let h = shannon_entropy_in_base(row.weights, args.epsilon, args.log_base)?;
            writeln!(csv, "{name},{},{},{},{h},{focus}", row.layer, row.head, export.query_positions[row.query])?;
        }
    }
    std::fs::write(args.out.join("entropy_focus.csv"), csv)?;

    println!("{:<8} {:>12} {:>12} {:>12}", "category", "base", "optimized", "delta");
    for (cat, r) in &realloc {
        println!("{:<8} {:>12.6} {:>12.6} {:>+12.6}", cat.name(), r.mass_base, r.mass_optimized, r.delta);
    }
    Ok(Completion::Clean)
}
