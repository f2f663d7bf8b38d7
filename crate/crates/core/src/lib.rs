//! Pre-inference prompt disambiguation driven by small language models.
//!
//! A user prompt is scanned for semantic risk points (unclear referents,
//! missing assumptions, temporal ambiguity). Each point gets two independent
//! readings whose embeddings are compared; agreeing readings are fused,
//! conflicting ones resolved. The results are aggregated into a clarifying
//! context appended to the original prompt before it reaches the target
//! model.
//!
//! Besides the [`pipeline`] the crate ships an evaluation harness
//! ([`eval`]), attention diagnostics ([`attention`]) and the `disambig`
//! command-line tool ([`cli`]). The guide under `book/` walks through each
//! part; its code samples are compiled as doc-tests of this crate.

pub mod attention;
pub mod cli;
pub mod client;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod templates;

pub use client::{BackendConfig, ModelBackend, UsageLedger, UsageRole};
pub use model::{DisambiguatedPrompt, RiskPoint, RiskType};
pub use pipeline::{Ablation, Disambiguator, PipelineConfig, PipelineTrace};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/risk-points.md")]
    mod risk_points {}
    #[doc = include_str!("../../../book/src/templates.md")]
    mod templates {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/consistency-gate.md")]
    mod consistency_gate {}
    #[doc = include_str!("../../../book/src/ablations.md")]
    mod ablations {}
    #[doc = include_str!("../../../book/src/backends.md")]
    mod backends {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/export-format.md")]
    mod export_format {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
