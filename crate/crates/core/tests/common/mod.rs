#![allow(dead_code)]

use std::sync::Arc;

use disambig::client::{BackendConfig, ChatRule, EmbedRule, ScriptFile, ScriptedBackend, SharedBackend};
use disambig::pipeline::{Ablation, Disambiguator, PipelineConfig};

pub const DEMO_PROMPT: &str = "Problem:
Company A starts with $1000.
Company B starts with $2000.
There are two potential costs:
Marketing ($400) and R&D ($300).
Company A pays for Marketing.
It then transfers half of the remainder to Company B.
Later, Company B invests 20% of it into R&D.
Question:
How much money does Company B have left?
Let's think step by step.";

// substrings that only occur in one template each
pub const L1_MARK: &str = "Your task is to identify spans";
pub const L2_MARK: &str = "Semantic Risk Point:\n";
pub const RESOLVE_MARK: &str = "Interpretation 1:\n";
pub const L3_MARK: &str = "Resolved Clarifications:\n";

pub const SLM_PRICE_IN: f64 = 0.15;
pub const SLM_PRICE_OUT: f64 = 0.60;
pub const EMBED_PRICE_IN: f64 = 0.02;

pub fn slm_config() -> BackendConfig {
    BackendConfig::offline("slm-mock", SLM_PRICE_IN, SLM_PRICE_OUT)
}

pub fn embed_config() -> BackendConfig {
    BackendConfig::offline("embed-mock", EMBED_PRICE_IN, 0.0)
}

pub fn target_config() -> BackendConfig {
    BackendConfig::offline("target-mock", 0.15, 0.60)
}

pub const L1_REPLY_TWO: &str =
    "SPAN: the remainder || TYPE: missing assumption\nSPAN: 20% of it || TYPE: referential ambiguity";
pub const SPANS: [&str; 2] = ["the remainder", "20% of it"];

pub fn reading(point: usize, channel: usize) -> String {
    format!("reading {point}.{channel}")
}

/// Script for the two-risk demo. `consistent[i]` decides whether the two
/// readings of point `i` embed close together (cosine ~0.99) or apart (0).
pub fn two_risk_script(consistent: [bool; 2]) -> (ScriptFile, ScriptFile) {
    let mut chat = vec![ChatRule::once(L1_MARK, L1_REPLY_TWO)];
    let mut embed = Vec::new();
    for (i, span) in SPANS.iter().enumerate() {
        let mark = format!("{L2_MARK}{span}");
        chat.push(ChatRule::once(mark.clone(), reading(i, 1)).with_seed(2025));
        chat.push(ChatRule::once(mark, reading(i, 2)).with_seed(2026));
        // axis 2i vs 2i+1 gives orthogonal vectors per point
        let mut a = vec![0.0; 4];
        let mut b = vec![0.0; 4];
        a[2 * i] = 1.0;
        if consistent[i] {
            b[2 * i] = 0.9;
            b[2 * i + 1] = 0.1;
        } else {
            b[2 * i + 1] = 1.0;
        }
        embed.push(EmbedRule::always(reading(i, 1), a));
        embed.push(EmbedRule::always(reading(i, 2), b));
        chat.push(ChatRule::once(format!("{RESOLVE_MARK}{}", reading(i, 1)), format!("resolved {i}")));
    }
    chat.push(ChatRule::once(L3_MARK, "Clarification: B invests 20% of the amount it received from A."));
    (ScriptFile { chat, embed: vec![] }, ScriptFile { chat: vec![], embed })
}

pub struct Fixture {
    pub slm: Arc<ScriptedBackend>,
    pub embed: Arc<ScriptedBackend>,
}

impl Fixture {
    pub fn new(slm: ScriptFile, embed: ScriptFile) -> Self {
        Fixture {
            slm: Arc::new(ScriptedBackend::from_script(slm_config(), slm)),
            embed: Arc::new(ScriptedBackend::from_script(embed_config(), embed)),
        }
    }

    pub fn two_risk(consistent: [bool; 2]) -> Self {
        let (s, e) = two_risk_script(consistent);
        Self::new(s, e)
    }

    pub fn pipeline(&self, ablation: Ablation) -> Disambiguator {
        let config = PipelineConfig { ablation, ..PipelineConfig::default() };
        Disambiguator::new(config, self.slm.clone() as SharedBackend, self.embed.clone() as SharedBackend).unwrap()
    }

    pub fn chat_calls_with(&self, mark: &str) -> usize {
        self.slm.calls().iter().filter(|c| c.input.contains(mark)).count()
    }
}

pub mod synth {
    use disambig::attention::{AttentionExport, ExportToken, HeadMode};
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    pub const WORDS: [&str; 8] = ["<s>", "Company", "A", "pays", "the", "remainder", "to", "B"];

    /// Tokens for `WORDS`, with the begin marker as an empty span at 0.
    pub fn tokens() -> (String, Vec<ExportToken>) {
        let prompt = WORDS[1..].join(" ");
        let mut tokens = vec![ExportToken { text: "<s>".into(), start_char: 0, end_char: 0 }];
        let mut at = 0;
        for w in &WORDS[1..] {
            let len = w.chars().count();
            tokens.push(ExportToken { text: (*w).into(), start_char: at, end_char: at + len });
            at += len + 1;
        }
        (prompt, tokens)
    }

    /// Builds an export whose row for query `q` is `row(layer, head, q)`.
    pub fn export(
        layers: usize,
        heads: usize,
        queries: &[usize],
        mut row: impl FnMut(usize, usize, usize) -> Vec<f64>,
    ) -> AttentionExport {
        let (prompt, tokens) = tokens();
        let weights = (0..layers)
            .map(|l| (0..heads).map(|h| queries.iter().map(|&q| row(l, h, q)).collect()).collect())
            .collect();
        AttentionExport {
            model: "synthetic".into(),
            prompt,
            tokens,
            query_positions: queries.to_vec(),
            layers,
            heads,
            head_mode: HeadMode::Full,
            weights,
            provenance: None,
        }
    }

    pub fn uniform(n: usize) -> Vec<f64> {
        vec![1.0 / n as f64; n]
    }

    pub fn one_hot(n: usize, at: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[at] = 1.0;
        v
    }

    pub fn random_row(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0f64).powi(3) + 1e-6).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / total).collect()
    }

    pub fn random_export(rng: &mut ChaCha8Rng) -> AttentionExport {
        let layers = rng.gen_range(1..5);
        let heads = rng.gen_range(1..4);
        let mut queries: Vec<usize> = (0..WORDS.len()).filter(|_| rng.gen_bool(0.6)).collect();
        if queries.is_empty() {
            queries.push(WORDS.len() - 1);
        }
        let mut rows = Vec::new();
        for _ in 0..layers * heads {
            for &q in &queries {
                rows.push(random_row(rng, q + 1));
            }
        }
        let mut it = rows.into_iter();
        export(layers, heads, &queries, |_, _, _| it.next().unwrap())
    }
}
