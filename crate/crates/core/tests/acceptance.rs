//! Acceptance checks. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any check fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::synth::*;
use common::*;
use disambig::attention::*;
use disambig::client::{ChatRule, EmbedRule, ScriptFile, ScriptedBackend, SharedBackend, UsageLedger, UsageRole};
use disambig::eval::{run_eval, BenchmarkItem, EvalOptions};
use disambig::model::{EmbeddingVector, ResolutionSource};
use disambig::pipeline::{cosine_similarity, Ablation};
use disambig::templates::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type GoldenCase = (TemplateId, &'static str, Vec<(&'static str, &'static str)>);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

// 32 / sqrt(14 * 77), evaluated to 20 digits offline
const COSINE_123_456: f64 = 0.974_631_846_197_076_3;
const COSINE_TOL: f64 = 1e-6;
const COST_TOL: f64 = 1e-12;
const ATTN_TOL: f64 = 1e-9;

fn main() -> ExitCode {
    let started = Instant::now();
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    let checks: Vec<(&str, Check)> = vec![
        ("pipeline determinism & shape", rt.block_on(determinism_and_shape())),
        ("consistency gate", rt.block_on(consistency_gate())),
        ("ablation parity", rt.block_on(ablation_parity())),
        ("template fidelity", template_fidelity()),
        ("metrics oracle", rt.block_on(metrics_oracle())),
        ("cost accounting", rt.block_on(cost_accounting())),
        ("attention math", attention_math()),
    ];
    let mut failed = 0;
    for (name, result) in &checks {
        match result {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }

    let elapsed = started.elapsed();
    if elapsed < Duration::from_secs(60) {
        println!("PASS  offline suite: all checks used scripted backends, {:.2}s (< 60s)", elapsed.as_secs_f64());
    } else {
        failed += 1;
        println!("FAIL  offline suite: took {:.2}s", elapsed.as_secs_f64());
    }

    match rt.block_on(live_smoke()) {
        None => println!("SKIP  live smoke: set DISAMBIG_LIVE_CONFIG and DISAMBIG_LIVE_BENCH to run"),
        Some(Ok(detail)) => println!("PASS  live smoke: {detail}"),
        Some(Err(why)) => {
            failed += 1;
            println!("FAIL  live smoke: {why}");
        }
    }

    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance check(s) failed");
        ExitCode::FAILURE
    }
}

async fn determinism_and_shape() -> Check {
    let started = Instant::now();
    let mut outputs = BTreeSet::new();
    for _ in 0..10 {
        let f = Fixture::two_risk([true, true]);
        let (out, trace) = f
            .pipeline(Ablation::Full)
            .disambiguate(DEMO_PROMPT, &UsageLedger::new())
            .await
            .map_err(|e| e.to_string())?;
        outputs.insert((out.final_text, serde_json::to_string(&trace).unwrap()));
        let counts = (
            f.chat_calls_with(L1_MARK),
            f.chat_calls_with(L2_MARK),
            f.embed.embed_calls(),
            f.chat_calls_with(RESOLVE_MARK),
            f.chat_calls_with(L3_MARK),
        );
        ensure!(counts == (1, 4, 4, 0, 1), "call counts (L1, interpret, embed, resolve, L3) = {counts:?}");
    }
    let elapsed = started.elapsed();
    ensure!(outputs.len() == 1, "{} distinct outputs over 10 runs", outputs.len());
    ensure!(elapsed < Duration::from_secs(1), "10 runs took {elapsed:?}");
    Ok(format!("10 identical runs, 1+4+4+1 calls, {:.1} ms", elapsed.as_secs_f64() * 1e3))
}

fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

async fn consistency_gate() -> Check {
    let a = EmbeddingVector::new(vec![1.0, 2.0, 3.0]).unwrap();
    let b = EmbeddingVector::new(vec![4.0, 5.0, 6.0]).unwrap();
    let c = cosine_similarity(&a, &b).map_err(|e| e.to_string())?;
    ensure!((c - COSINE_123_456).abs() <= COSINE_TOL, "cosine([1,2,3],[4,5,6]) = {c}");

    let mut rng = ChaCha8Rng::seed_from_u64(2025);
    let mut expected = 0;
    let mut chat = Vec::new();
    let mut embed = Vec::new();
    for i in 0..100 {
        let va: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // bias toward agreement so both sides of the gate are well populated
        let vb: Vec<f64> = va.iter().map(|x| x + rng.gen_range(-0.8..0.8)).collect();
        if oracle_cosine(&va, &vb) < 0.8 {
            expected += 1;
        }
        chat.push(ChatRule::once(format!("{L2_MARK}pair{i:03}"), format!("first{i:03}")).with_seed(2025));
        chat.push(ChatRule::once(format!("{L2_MARK}pair{i:03}"), format!("second{i:03}")).with_seed(2026));
        embed.push(EmbedRule::once(format!("first{i:03}"), va));
        embed.push(EmbedRule::once(format!("second{i:03}"), vb));
    }
    chat.push(ChatRule::always(RESOLVE_MARK, "merged"));
    let f = Fixture::new(ScriptFile { chat, embed: vec![] }, ScriptFile { chat: vec![], embed });
    let p = f.pipeline(Ablation::Full);
    let ledger = UsageLedger::new();
    for i in 0..100 {
        let point = disambig::model::RiskPoint::candidate(format!("pair{i:03}"), disambig::RiskType::Referential);
        let pair = p.interpret_pair("q", i, &point, &ledger).await.map_err(|e| e.to_string())?;
        p.verify_and_resolve("q", &pair, &ledger).await.map_err(|e| e.to_string())?;
    }
    let got = f.chat_calls_with(RESOLVE_MARK);
    ensure!(got == expected, "resolver calls {got} != oracle count {expected}");
    ensure!(expected > 0 && expected < 100, "degenerate sample: {expected} of 100 below threshold");
    Ok(format!("cosine = {c:.9}; {got}/100 pairs resolved, matching oracle"))
}

async fn ablation_parity() -> Check {
    // (ablation, slm chats, embeds, interpretations, verdicts, resolver calls, L3 calls, fused resolutions)
    let table = [
        (Ablation::Full, 7, 4, 4, 2, 1, 1, 1),
        (Ablation::SingleChannel, 4, 0, 2, 0, 0, 1, 2),
        (Ablation::NoConflictResolution, 6, 4, 4, 2, 0, 1, 2),
        (Ablation::NoL3, 6, 4, 4, 2, 1, 0, 1),
        (Ablation::NoL2L3, 1, 0, 0, 0, 0, 0, 0),
    ];
    for (ablation, chats, embeds, interps, verdicts, resolves, l3, fused) in table {
        let f = Fixture::two_risk([true, false]);
        let ledger = UsageLedger::new();
        let (out, trace) =
            f.pipeline(ablation).disambiguate(DEMO_PROMPT, &ledger).await.map_err(|e| format!("{ablation}: {e}"))?;
        let got = (
            f.slm.chat_calls(),
            f.embed.embed_calls(),
            trace.interpretations.len(),
            trace.verdicts.len(),
            f.chat_calls_with(RESOLVE_MARK),
            f.chat_calls_with(L3_MARK),
            trace.resolutions.iter().filter(|r| r.source == ResolutionSource::Fused).count(),
        );
        let want = (chats, embeds, interps, verdicts, resolves, l3, fused);
        ensure!(got == want, "{ablation}: got {got:?}, want {want:?}");
        ensure!(ledger.count(UsageRole::Optimizer) == chats + embeds, "{ablation}: ledger count");
        ensure!(out.final_text.starts_with(DEMO_PROMPT), "{ablation}: Q' does not start with Q");
        ensure!(out.enhanced.resolved_count == 2, "{ablation}: resolved_count {}", out.enhanced.resolved_count);
        if ablation == Ablation::SingleChannel {
            ensure!(trace.resolutions[0].text == "reading 0.1\nreading 0.1", "single channel fusion text");
        }
    }
    Ok("Full 7/4, SingleChannel 4/0, NoConflictResolution 6/4, NoL3 6/4, NoL2L3 1/0 (chats/embeds)".into())
}

fn template_fidelity() -> Check {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()));
    for t in TemplateId::ALL {
        let on_disk = read(&root.join("../../templates").join(t.file_name()))?;
        ensure!(on_disk == t.body(), "{} differs from the built-in template", t.file_name());
    }
    let footer = read(&root.join("../../templates/l1_output_footer.txt"))?;
    ensure!(footer == L1_OUTPUT_FOOTER, "L1 footer differs");

    let cases: [GoldenCase; 5] = [
        (TemplateId::L1RiskIdentify, "l1_demo.txt", vec![(INPUT_PROMPT, DEMO_PROMPT)]),
        (
            TemplateId::L2Interpret,
            "l2_interpret_demo.txt",
            vec![(INPUT_PROMPT, DEMO_PROMPT), (RISK_SPAN, "the remainder")],
        ),
        (
            TemplateId::L2Resolve,
            "l2_resolve_demo.txt",
            vec![
                (INPUT_PROMPT, DEMO_PROMPT),
                (INTERPRETATION_1, "The remainder is what A has left after Marketing."),
                (INTERPRETATION_2, "The remainder is what is left of the $1000 budget."),
            ],
        ),
        (
            TemplateId::L3Aggregate,
            "l3_aggregate_demo.txt",
            vec![
                (INPUT_PROMPT, DEMO_PROMPT),
                (RESOLVED_EXPLANATIONS, "1. The remainder is $600.\n2. \"it\" refers to the amount B received."),
            ],
        ),
        (
            TemplateId::Augment,
            "augment_demo.txt",
            vec![(QUESTION, "Company A pays $400 for marketing. How much of $1000 is left?")],
        ),
    ];
    for (id, file, values) in cases {
        let rendered = render(id, &values.into_iter().collect()).map_err(|e| e.to_string())?;
        let golden = read(&root.join("tests/golden").join(file))?;
        ensure!(rendered.text.as_bytes() == golden.as_bytes(), "{file}: rendered prompt differs from golden file");
    }
    Ok("5 templates + footer byte-identical; 5 rendered prompts match golden files".into())
}

fn scripted_target(table: &[Vec<String>], k: usize) -> SharedBackend {
    let mut rules = Vec::new();
    for (n, row) in table.iter().enumerate() {
        for (j, a) in row.iter().take(k).enumerate() {
            rules.push(ChatRule::once(format!("<<item {n:03}>>"), format!("Answer: {a}")).with_seed(2025 + j as i64));
        }
    }
    Arc::new(ScriptedBackend::new(target_config(), rules, vec![]))
}

fn items(n: usize, golds: &[String]) -> Vec<BenchmarkItem> {
    (0..n)
        .map(|i| BenchmarkItem {
            id: format!("i{i:03}"),
            question: format!("<<item {i:03}>>"),
            answer: golds[i].clone(),
            choices: None,
        })
        .collect()
}

/// Rates recomputed straight from the answer table.
fn brute_rates(table: &[Vec<String>], golds: &[String]) -> (f64, f64, f64) {
    let n = table.len() as f64;
    let (mut acc1, mut maj, mut dis) = (0.0, 0.0, 0.0);
    for (row, gold) in table.iter().zip(golds) {
        acc1 += f64::from(u8::from(&row[0] == gold));
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for a in row {
            *counts.entry(a).or_default() += 1;
        }
        let top = *counts.values().max().unwrap();
        let winner = counts.iter().find(|(_, c)| **c == top).unwrap().0;
        maj += f64::from(u8::from(*winner == gold));
        dis += f64::from(u8::from(row.iter().any(|a| a != &row[0])));
    }
    (acc1 / n, maj / n, dis / n)
}

async fn metrics_oracle() -> Check {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let mut table = vec![s(&["a"; 5]); 6];
    table.extend(vec![s(&["a", "a", "b", "a", "a"]); 2]);
    table.extend(vec![s(&["b"; 5]); 2]);
    let golds = vec!["a".to_string(); 10];
    let out =
        run_eval(&items(10, &golds), &EvalOptions::default(), None, &scripted_target(&table, 5), &UsageLedger::new())
            .await
            .map_err(|e| e.to_string())?;
    let r = &out.report;
    ensure!(
        (r.acc_at_1, r.majority_acc, r.disagreement_rate) == (0.8, 0.8, 0.2),
        "fixture gave {} / {} / {}",
        r.acc_at_1,
        r.majority_acc,
        r.disagreement_rate
    );

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let alphabet = ["a", "b", "c", "d"];
    for run in 0..1000 {
        let n = rng.gen_range(1..12);
        let k = rng.gen_range(1..7);
        let table: Vec<Vec<String>> =
            (0..n).map(|_| (0..k).map(|_| alphabet[rng.gen_range(0..4)].to_string()).collect()).collect();
        let golds: Vec<String> = (0..n).map(|_| alphabet[rng.gen_range(0..4)].to_string()).collect();
        let options = EvalOptions { k, ..EvalOptions::default() };
        let out = run_eval(&items(n, &golds), &options, None, &scripted_target(&table, k), &UsageLedger::new())
            .await
            .map_err(|e| format!("run {run}: {e}"))?;
        let got = (out.report.acc_at_1, out.report.majority_acc, out.report.disagreement_rate);
        let want = brute_rates(&table, &golds);
        ensure!(got == want, "run {run} (n={n}, k={k}): got {got:?}, oracle {want:?}");
    }
    Ok("fixture 0.8/0.8/0.2; 1000 random runs equal the brute-force recount".into())
}

fn tokens(text: &str) -> f64 {
    text.chars().count().div_ceil(4) as f64
}

async fn cost_accounting() -> Check {
    let f = Fixture::two_risk([true, false]);
    let pipeline = f.pipeline(Ablation::Full);
    let bench = BenchmarkItem { id: "demo".into(), question: DEMO_PROMPT.into(), answer: "1500".into(), choices: None };
    let rules = (0..5).map(|j| ChatRule::once("Clarifying context:", "Answer: 1500").with_seed(2025 + j)).collect();
    let target: SharedBackend = Arc::new(ScriptedBackend::new(target_config(), rules, vec![]));
    let ledger = UsageLedger::new();
    let options = EvalOptions { optimize: true, ..EvalOptions::default() };
    let out = run_eval(&[bench], &options, Some(&pipeline), &target, &ledger).await.map_err(|e| e.to_string())?;

    // The reply each SLM prompt receives is fixed by the script, so the cost
    // follows from the prompts the pipeline sent.
    let reply_for = |input: &str, seed: Option<i64>| -> Result<String, String> {
        if input.contains(L1_MARK) {
            return Ok(L1_REPLY_TWO.into());
        }
        if input.contains(L3_MARK) {
            return Ok("Clarification: B invests 20% of the amount it received from A.".into());
        }
        for (i, span) in SPANS.iter().enumerate() {
            if input.contains(RESOLVE_MARK) && input.contains(&format!("{RESOLVE_MARK}{}", reading(i, 1))) {
                return Ok(format!("resolved {i}"));
            }
            if input.contains(&format!("{L2_MARK}{span}")) {
                return Ok(reading(i, if seed == Some(2025) { 1 } else { 2 }));
            }
        }
        Err(format!("unexpected prompt {input:?}"))
    };
    let mut expected = 0.0;
    for call in f.slm.calls() {
        let reply = reply_for(&call.input, call.seed)?;
        expected += tokens(&call.input) / 1000.0 * SLM_PRICE_IN + tokens(&reply) / 1000.0 * SLM_PRICE_OUT;
    }
    for call in f.embed.calls() {
        expected += tokens(&call.input) / 1000.0 * EMBED_PRICE_IN;
    }
    let got = out.report.avg_optimizer_cost_usd;
    ensure!((got - expected).abs() <= COST_TOL, "avg optimizer cost {got} != hand-derived {expected}");
    let target_cost = ledger.subtotal(UsageRole::Target);
    ensure!(ledger.count(UsageRole::Target) == 5 && target_cost > 0.0, "target calls were not billed");
    ensure!((ledger.total_cost() - got - target_cost).abs() <= COST_TOL, "target cost leaked into optimizer average");
    Ok(format!(
        "optimizer ${got:.9} over {} calls; target ${target_cost:.9} excluded",
        f.slm.chat_calls() + f.embed.embed_calls()
    ))
}

fn brute_entropy(row: &[f64]) -> f64 {
    let mut h = 0.0;
    for &a in row {
        h -= a * (a + 1e-10).ln();
    }
    h
}

fn attention_math() -> Check {
    let one_hot_h = shannon_entropy(&one_hot(8, 3), DEFAULT_EPSILON).map_err(|e| e.to_string())?;
    ensure!((one_hot_h - (-(1.0f64 + 1e-10).ln())).abs() <= ATTN_TOL, "one-hot entropy {one_hot_h}");
    let uniform_h = shannon_entropy(&uniform(8), DEFAULT_EPSILON).map_err(|e| e.to_string())?;
    ensure!((uniform_h - 8f64.ln()).abs() <= 1e-6, "uniform entropy {uniform_h}");

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let targets: BTreeSet<usize> = [1, 5].into();
    for n in 0..50 {
        let base = random_export(&mut rng);
        let opt = random_export(&mut rng);
        base.validate().map_err(|e| format!("export {n}: {e}"))?;
        let bs = FocusSpec::categorize(&base, targets.clone());
        let os = FocusSpec::categorize(&opt, targets.clone());

        let points = entropy_focus_distribution(&base, &bs, DEFAULT_EPSILON).map_err(|e| e.to_string())?;
        let mut i = 0;
        let mut layer_focus = vec![0.0; base.layers];
        for (l, layer) in base.weights.iter().enumerate() {
            for head in layer {
                for row in head {
                    let focus: f64 = row.iter().enumerate().filter(|(k, _)| targets.contains(k)).map(|(_, w)| w).sum();
                    ensure!((points[i].0 - brute_entropy(row)).abs() <= ATTN_TOL, "export {n} row {i}: entropy");
                    ensure!((points[i].1 - focus).abs() <= ATTN_TOL, "export {n} row {i}: focus");
                    layer_focus[l] += focus / (base.heads * base.query_positions.len()) as f64;
                    i += 1;
                }
            }
        }
        ensure!(i == points.len(), "export {n}: point count");
        let curve = layerwise_focus_curve(&base, &bs).map_err(|e| e.to_string())?;
        for (l, f) in curve {
            ensure!((f - layer_focus[l]).abs() <= ATTN_TOL, "export {n} layer {l}: curve");
        }

        let re = category_reallocation(&base, &bs, &opt, &os).map_err(|e| e.to_string())?;
        for cat in TokenCategory::ALL {
            let mass = |e: &AttentionExport, spec: &FocusSpec| {
                let rows: Vec<&Vec<f64>> = e.weights.iter().flatten().flatten().collect();
                rows.iter()
                    .map(|r| {
                        let total: f64 = r.iter().sum();
                        r.iter()
                            .enumerate()
                            .filter(|(k, _)| spec.category_map[*k] == cat)
                            .map(|(_, w)| w / total)
                            .sum::<f64>()
                    })
                    .sum::<f64>()
                    / rows.len() as f64
            };
            let (mb, mo) = (mass(&base, &bs), mass(&opt, &os));
            ensure!((re[&cat].delta - (mo - mb)).abs() <= ATTN_TOL, "export {n} {}: delta", cat.name());
            ensure!((re[&cat].mass_base - mb).abs() <= ATTN_TOL, "export {n} {}: base mass", cat.name());
        }
    }

    // mass moved from the sink onto the target span
    let q = export(4, 2, &[5, 6, 7], |_, _, q| {
        let mut r = vec![0.2 / q as f64; q + 1];
        r[0] = 0.8;
        r
    });
    let q_prime = export(4, 2, &[5, 6, 7], |_, _, q| {
        let mut r = vec![0.2 / q as f64; q + 1];
        r[0] = 0.3;
        r[REMAINDER_TOKEN] += 0.5;
        r
    });
    let spec = FocusSpec::categorize(&q, [REMAINDER_TOKEN].into());
    let re = category_reallocation(&q, &spec, &q_prime, &spec).map_err(|e| e.to_string())?;
    let (sink, target) = (re[&TokenCategory::Sink].delta, re[&TokenCategory::Target].delta);
    ensure!(target > 0.0 && sink < 0.0, "directional signature missing: sink {sink}, target {target}");
    Ok(format!("entropy endpoints exact; 50 random exports within 1e-9; sink {sink:+.3}, target {target:+.3}"))
}

const REMAINDER_TOKEN: usize = 5;

async fn live_smoke() -> Option<Check> {
    let config = std::env::var("DISAMBIG_LIVE_CONFIG").ok()?;
    let bench = std::env::var("DISAMBIG_LIVE_BENCH").ok()?;
    Some(run_live(Path::new(&config), Path::new(&bench)).await)
}

async fn run_live(config: &Path, bench: &Path) -> Check {
    let config = disambig::cli::AppConfig::load(config).map_err(|e| format!("{e:#}"))?;
    let items = disambig::eval::load_benchmark(bench).map_err(|e| e.to_string())?;
    let items = disambig::eval::subsample(&items, 5, 2025);
    let pipeline = config.disambiguator(None).map_err(|e| format!("{e:#}"))?;
    let section = config.target.as_ref().ok_or("config has no [target] section")?;
    let target = section.build(&config.base_dir).map_err(|e| format!("{e:#}"))?;
    let options = EvalOptions { optimize: true, ..EvalOptions::default() };
    let out =
        run_eval(&items, &options, Some(&pipeline), &target, &UsageLedger::new()).await.map_err(|e| e.to_string())?;
    for rec in &out.records {
        let item = items.iter().find(|i| i.id == rec.item_id).unwrap();
        ensure!(rec.final_prompt.contains(&item.question), "item {}: Q' lost the original question", item.id);
    }
    Ok(format!(
        "{} item(s) scored, {} errored, Acc@1 {:.2}",
        out.report.n_items, out.report.n_errored, out.report.acc_at_1
    ))
}
