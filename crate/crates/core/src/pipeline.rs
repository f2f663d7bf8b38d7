//! The three-layer disambiguation flow.
//!
//! 1. Risk identification: one SLM call lists risky spans of the prompt.
//! 2. For each span, two independent readings are sampled, embedded and
//!    compared by cosine similarity. Agreeing readings are concatenated;
//!    disagreeing ones go through one resolver call.
//! 3. All resolved explanations are aggregated by one more SLM call into an
//!    enhanced context, which is appended to the original prompt.
//!
//! Every model call made here is billed as [`UsageRole::Optimizer`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use futures::future::try_join_all;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{chat, embed, ChatRequest, ClientError, SharedBackend, UsageLedger, UsageRole};
use crate::model::{
    Channel, ConsistencyVerdict, DisambiguatedPrompt, EmbeddingVector, EnhancedContext, Interpretation,
    ResolutionSource, ResolvedExplanation, RiskPoint,
};
use crate::templates::{
    numbered_list, parse_risk_points, render, TemplateError, TemplateId, DEFAULT_MAX_POINTS, INPUT_PROMPT,
    INTERPRETATION_1, INTERPRETATION_2, RESOLVED_EXPLANATIONS, RISK_SPAN,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("cannot take cosine similarity of an all-zero vector")]
    ZeroVector,
    #[error("model returned an empty {0}")]
    EmptyModelOutput(&'static str),
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("prompt is empty")]
    EmptyPrompt,
}

/// Which parts of the flow run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Identify risks only; the context just lists them.
    NoL2L3,
    /// One reading per risk point, no consistency check.
    SingleChannel,
    /// Disagreeing readings are concatenated instead of resolved.
    NoConflictResolution,
    /// The numbered list of explanations is used as the context directly.
    NoL3,
}

impl Ablation {
    pub const ALL: [Ablation; 5] =
        [Ablation::Full, Ablation::NoL2L3, Ablation::SingleChannel, Ablation::NoConflictResolution, Ablation::NoL3];

    fn is_dual(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoConflictResolution | Ablation::NoL3)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::NoL2L3 => "no_l2_l3",
            Ablation::SingleChannel => "single_channel",
            Ablation::NoConflictResolution => "no_conflict_resolution",
            Ablation::NoL3 => "no_l3",
        })
    }
}

impl FromStr for Ablation {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| PipelineError::InvalidConfig(format!("unknown ablation `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Similarity threshold at or above which two readings agree.
    pub delta: f64,
    pub temperature: f64,
    pub max_points: usize,
    /// Seed of the first reading channel; the second uses `seed + 1`.
    pub seed: i64,
    pub ablation: Ablation,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            delta: 0.8,
            temperature: 0.2,
            max_points: DEFAULT_MAX_POINTS,
            seed: 2025,
            ablation: Ablation::Full,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(PipelineError::InvalidConfig(format!("delta must be in (0, 1], got {}", self.delta)));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(PipelineError::InvalidConfig("temperature must be >= 0".into()));
        }
        if self.max_points == 0 {
            return Err(PipelineError::InvalidConfig("max_points must be positive".into()));
        }
        Ok(())
    }
}

/// Everything one run produced, in risk-point order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub ablation: Ablation,
    pub risk_points: Vec<RiskPoint>,
    pub interpretations: Vec<Interpretation>,
    pub verdicts: Vec<ConsistencyVerdict>,
    pub resolutions: Vec<ResolvedExplanation>,
    pub enhanced: EnhancedContext,
    pub optimizer_cost_usd: f64,
}

/// `dot(a, b) / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, PipelineError> {
    if a.dim() != b.dim() {
        return Err(PipelineError::DimensionMismatch(a.dim(), b.dim()));
    }
    if a.is_zero() || b.is_zero() {
        return Err(PipelineError::ZeroVector);
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.values().iter().zip(b.values()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

struct PointOutcome {
    interpretations: Vec<Interpretation>,
    verdict: Option<ConsistencyVerdict>,
    resolution: ResolvedExplanation,
}

/// Runs the disambiguation flow against configured backends.
#[derive(Clone)]
pub struct Disambiguator {
    config: PipelineConfig,
    slm: SharedBackend,
    second_slm: Option<SharedBackend>,
    embedder: SharedBackend,
}

impl fmt::Debug for Disambiguator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Disambiguator")
            .field("config", &self.config)
            .field("slm", &self.slm.config().model)
            .field("second_slm", &self.second_slm.as_ref().map(|b| b.config().model.clone()))
            .field("embedder", &self.embedder.config().model)
            .finish()
    }
}

impl Disambiguator {
    pub fn new(config: PipelineConfig, slm: SharedBackend, embedder: SharedBackend) -> Result<Self, PipelineError> {
        config.validate()?;
        Ok(Disambiguator { config, slm, second_slm: None, embedder })
    }

    /// Routes the second reading channel to a different model.
    pub fn with_second_slm(mut self, backend: SharedBackend) -> Self {
        self.second_slm = Some(backend);
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    async fn ask(
        &self,
        backend: &SharedBackend,
        text: String,
        seed: i64,
        ledger: &UsageLedger,
    ) -> Result<String, PipelineError> {
        let request = ChatRequest::user(text, self.config.temperature, Some(seed));
        Ok(chat(backend.as_ref(), &request, UsageRole::Optimizer, ledger).await?.text)
    }

    /// Layer 1: one SLM call, parsed into at most `max_points` risk points.
    pub async fn identify_risks(&self, prompt: &str, ledger: &UsageLedger) -> Result<Vec<RiskPoint>, PipelineError> {
        if prompt.trim().is_empty() {
            return Err(PipelineError::EmptyPrompt);
        }
        let rendered = render(TemplateId::L1RiskIdentify, &BTreeMap::from([(INPUT_PROMPT, prompt)]))?;
        let reply = self.ask(&self.slm, rendered.text, self.config.seed, ledger).await?;
        Ok(parse_risk_points(&reply, prompt, self.config.max_points))
    }

    /// Layer 2, first half: two readings of one risk point, returned in
    /// channel order. Under [`Ablation::SingleChannel`] one call is made and
    /// its reading fills both slots.
    pub async fn interpret_pair(
        &self,
        prompt: &str,
        risk_index: usize,
        point: &RiskPoint,
        ledger: &UsageLedger,
    ) -> Result<(Interpretation, Interpretation), PipelineError> {
        let rendered = render(
            TemplateId::L2Interpret,
            &BTreeMap::from([(INPUT_PROMPT, prompt), (RISK_SPAN, point.span.as_str())]),
        )?;
        let reading = |channel: Channel, text: String| -> Result<Interpretation, PipelineError> {
            let text = text.trim().to_string();
            if text.is_empty() {
                return Err(PipelineError::EmptyModelOutput("interpretation"));
            }
            Ok(Interpretation { risk_index, channel, text })
        };

        if self.config.ablation == Ablation::SingleChannel {
            let text = self.ask(&self.slm, rendered.text, self.config.seed, ledger).await?;
            let first = reading(Channel::First, text)?;
            let second = Interpretation { channel: Channel::Second, ..first.clone() };
            return Ok((first, second));
        }

        let second_backend = self.second_slm.as_ref().unwrap_or(&self.slm);
        let (a, b) = futures::try_join!(
            self.ask(&self.slm, rendered.text.clone(), self.config.seed, ledger),
            self.ask(second_backend, rendered.text, self.config.seed + 1, ledger),
        )?;
        Ok((reading(Channel::First, a)?, reading(Channel::Second, b)?))
    }

    /// Embeds both readings and scores them. Both embeddings are billed.
    pub async fn verify(
        &self,
        first: &Interpretation,
        second: &Interpretation,
        ledger: &UsageLedger,
    ) -> Result<ConsistencyVerdict, PipelineError> {
        let (ea, eb) = futures::try_join!(
            embed(self.embedder.as_ref(), &first.text, ledger),
            embed(self.embedder.as_ref(), &second.text, ledger),
        )?;
        Ok(ConsistencyVerdict::new(cosine_similarity(&ea, &eb)?, self.config.delta))
    }

    /// Layer 2, second half: gate the pair and produce one explanation.
    ///
    /// Returns the verdict alongside the explanation so callers can trace it.
    pub async fn verify_and_resolve(
        &self,
        prompt: &str,
        pair: &(Interpretation, Interpretation),
        ledger: &UsageLedger,
    ) -> Result<(ConsistencyVerdict, ResolvedExplanation), PipelineError> {
        let (first, second) = pair;
        let verdict = self.verify(first, second, ledger).await?;
        if verdict.consistent || self.config.ablation == Ablation::NoConflictResolution {
            return Ok((verdict, ResolvedExplanation::fused(first.risk_index, &first.text, &second.text)));
        }
        let rendered = render(
            TemplateId::L2Resolve,
            &BTreeMap::from([
                (INPUT_PROMPT, prompt),
                (INTERPRETATION_1, first.text.as_str()),
                (INTERPRETATION_2, second.text.as_str()),
            ]),
        )?;
        let text = self.ask(&self.slm, rendered.text, self.config.seed, ledger).await?;
        let text = text.trim().to_string();
        if text.is_empty() {
            return Err(PipelineError::EmptyModelOutput("resolution"));
        }
        Ok((
            verdict,
            ResolvedExplanation { risk_index: first.risk_index, text, source: ResolutionSource::ConflictResolved },
        ))
    }

    /// Layer 3: merge explanations into the enhanced context.
    pub async fn aggregate(
        &self,
        prompt: &str,
        resolutions: &[ResolvedExplanation],
        ledger: &UsageLedger,
    ) -> Result<EnhancedContext, PipelineError> {
        if resolutions.is_empty() {
            return Ok(EnhancedContext::empty());
        }
        let texts: Vec<&str> = resolutions.iter().map(|r| r.text.as_str()).collect();
        let list = numbered_list(&texts);
        let text = if self.config.ablation == Ablation::NoL3 {
            list
        } else {
            let rendered = render(
                TemplateId::L3Aggregate,
                &BTreeMap::from([(INPUT_PROMPT, prompt), (RESOLVED_EXPLANATIONS, list.as_str())]),
            )?;
            self.ask(&self.slm, rendered.text, self.config.seed, ledger).await?.trim().to_string()
        };
        if text.is_empty() {
            return Err(PipelineError::EmptyModelOutput("enhanced context"));
        }
        Ok(EnhancedContext { text, resolved_count: resolutions.len() })
    }

    async fn process_point(
        &self,
        prompt: &str,
        risk_index: usize,
        point: &RiskPoint,
        ledger: &UsageLedger,
    ) -> Result<PointOutcome, PipelineError> {
        let pair = self.interpret_pair(prompt, risk_index, point, ledger).await?;
        if !self.config.ablation.is_dual() {
            let resolution = ResolvedExplanation::fused(risk_index, &pair.0.text, &pair.1.text);
            return Ok(PointOutcome { interpretations: vec![pair.0], verdict: None, resolution });
        }
        let (verdict, resolution) = self.verify_and_resolve(prompt, &pair, ledger).await?;
        Ok(PointOutcome { interpretations: vec![pair.0, pair.1], verdict: Some(verdict), resolution })
    }

    /// Runs the whole flow on `prompt`.
    ///
    /// Usage is appended to `ledger`, including calls made before a failure.
    pub async fn disambiguate(
        &self,
        prompt: &str,
        ledger: &UsageLedger,
    ) -> Result<(DisambiguatedPrompt, PipelineTrace), PipelineError> {
        let local = UsageLedger::new();
        let result = self.run(prompt, &local).await;
        let cost = local.subtotal(UsageRole::Optimizer);
        ledger.absorb(&local);
        let (enhanced, mut trace) = result?;
        trace.optimizer_cost_usd = cost;
        Ok((DisambiguatedPrompt::compose(prompt, enhanced), trace))
    }

    async fn run(&self, prompt: &str, ledger: &UsageLedger) -> Result<(EnhancedContext, PipelineTrace), PipelineError> {
        let risk_points = self.identify_risks(prompt, ledger).await?;
        let mut trace = PipelineTrace {
            ablation: self.config.ablation,
            risk_points,
            interpretations: Vec::new(),
            verdicts: Vec::new(),
            resolutions: Vec::new(),
            enhanced: EnhancedContext::empty(),
            optimizer_cost_usd: 0.0,
        };
        if trace.risk_points.is_empty() {
            return Ok((EnhancedContext::empty(), trace));
        }

        if self.config.ablation == Ablation::NoL2L3 {
            let text = trace
                .risk_points
                .iter()
                .map(|p| format!("- Risk: {} ({})", p.span, p.risk_type))
                .collect::<Vec<_>>()
                .join("\n");
            trace.enhanced = EnhancedContext { text, resolved_count: trace.risk_points.len() };
            return Ok((trace.enhanced.clone(), trace));
        }

        // try_join_all keeps input order regardless of completion order
        let outcomes =
            try_join_all(trace.risk_points.iter().enumerate().map(|(i, p)| self.process_point(prompt, i, p, ledger)))
                .await?;
        for outcome in outcomes {
            trace.interpretations.extend(outcome.interpretations);
            trace.verdicts.extend(outcome.verdict);
            trace.resolutions.push(outcome.resolution);
        }

        trace.enhanced = self.aggregate(prompt, &trace.resolutions, ledger).await?;
        Ok((trace.enhanced.clone(), trace))
    }
}
