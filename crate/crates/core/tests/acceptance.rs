//! One line per acceptance criterion; exits non-zero if any fails.
#![allow(clippy::nonminimal_bool, clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity, clippy::unnecessary_lazy_evaluations)]

mod common;

use std::fs;
use std::time::{Duration, Instant};

use adversarial_news::backends::{
    EmbeddingBackend, StubDetector, StubDetectorSettings, StubEmbedding, StubEmbeddingSettings, StubGenerator,
    StubGeneratorSettings,
};
use adversarial_news::cli::{self, RunConfig};
use adversarial_news::corpus::CorpusStore;
use adversarial_news::detector::{cross_entropy, Verdict};
use adversarial_news::eval::{roc_auc, ScoredExample};
use adversarial_news::prompts::FEEDBACK_HEADER;
use adversarial_news::retrieval::{self, Metric, VectorIndex};
use adversarial_news::training::{self, LoopConfig, RoundLog};
use adversarial_news::vaf::{self, classify_reasons, extract_salient_tokens, Exemplar, ReasonKind, ReasonLexicons, Stopwords};
use adversarial_news::{Article, Exec, Label};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !($cond) {
            return Err(format!($($msg)+));
        }
    };
}

fn examples(labels: &[u8], scores: &[f64]) -> Vec<ScoredExample> {
    labels.iter().zip(scores).enumerate().map(|(i, (&l, &s))| ScoredExample::new(format!("x{i}"), l, s)).collect()
}

fn auc(labels: &[u8], scores: &[f64]) -> f64 {
    roc_auc(&examples(labels, scores)).unwrap()
}

fn auc_suite() -> Outcome {
    let fixed: [(&[u8], &[f64], f64); 3] = [
        (&[1, 1, 0, 0], &[0.9, 0.8, 0.3, 0.1], 1.0),
        (&[1, 0, 1, 0], &[0.8, 0.9, 0.6, 0.1], 0.5),
        (&[1, 0], &[0.5, 0.5], 0.5),
    ];
    for (l, s, want) in fixed {
        ensure!(auc(l, s) == want, "fixed example {l:?}/{s:?} gave {}", auc(l, s));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let n = rng.random_range(2..=200);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1)).collect();
        labels[0] = 1;
        labels[1] = 0;
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0u32..=30)) / 30.0).collect();
        let got = auc(&labels, &scores);
        let diff = (got - common::auc_pairwise(&labels, &scores)).abs();
        worst = worst.max(diff);
        ensure!(diff <= 1e-12, "case {case}: |auc - oracle| = {diff:e}");
        let sq: Vec<f64> = scores.iter().map(|s| s * s).collect();
        let affine: Vec<f64> = scores.iter().map(|s| 0.5 * s + 0.1).collect();
        ensure!((auc(&labels, &sq) - got).abs() <= 1e-12, "case {case}: square transform changed auc");
        ensure!((auc(&labels, &affine) - got).abs() <= 1e-12, "case {case}: affine transform changed auc");
        let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        let comp: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
        ensure!((auc(&flipped, &comp) - got).abs() <= 1e-12, "case {case}: complement symmetry broken");
    }
    Ok(format!("3 fixed + 100 random, max deviation {worst:e}"))
}

const WORDS: &[&str] = &[
    "council", "budget", "mayor", "river", "bridge", "school", "hospital", "election", "vote", "farm", "harvest",
    "port", "traffic", "court", "judge", "fire", "park", "library", "tax", "bill", "police", "festival", "water",
];

fn random_text(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn retrieval_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let emb = StubEmbedding::new(StubEmbeddingSettings { dimension: 32, ..Default::default() });
    for case in 0..50 {
        let n = rng.random_range(1..=1000);
        let store = CorpusStore::from_articles((0..n).map(|i| {
            let len = rng.random_range(1..10);
            Article::new(format!("p{i:04}"), random_text(&mut rng, len))
        }))
        .unwrap();
        let metric = if case % 2 == 0 { Metric::Cosine } else { Metric::InnerProduct };
        let k = [1, 3, 5][case % 3];
        let index = retrieval::build_index(&store, &emb, metric).map_err(|e| e.to_string())?;
        let rows: Vec<(String, Vec<f32>)> =
            store.articles().map(|a| (a.id.clone(), emb.embed_passage(&a.content).unwrap())).collect();
        let q = random_text(&mut rng, 5);
        let got = retrieval::query(&index, &emb, &store, &q, k, 0, Exec::Parallel).map_err(|e| e.to_string())?;
        let want = common::brute_force_top_k(&rows, &emb.embed_query(&q).unwrap(), k);
        let got_ids: Vec<&str> = got.iter().map(|p| p.article_id.as_str()).collect();
        let want_ids: Vec<&str> = want.iter().map(|w| w.0.as_str()).collect();
        ensure!(got_ids == want_ids, "case {case} (n={n}, k={k}): {got_ids:?} != {want_ids:?}");
    }
    let store = common::fixture_store();
    let index = retrieval::build_index(&store, &emb, Metric::Cosine).map_err(|e| e.to_string())?;
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    index.save(a.path()).map_err(|e| e.to_string())?;
    VectorIndex::load(a.path(), &store).map_err(|e| e.to_string())?.save(b.path()).map_err(|e| e.to_string())?;
    for f in [retrieval::MANIFEST, retrieval::VECTORS, retrieval::IDS] {
        ensure!(fs::read(a.path().join(f)).unwrap() == fs::read(b.path().join(f)).unwrap(), "{f} changed on reload");
    }
    Ok("50 random cases, reload byte-stable".into())
}

fn salience_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let stop = Stopwords::default();
    let mut nonempty = 0;
    for case in 0..100 {
        let (n_words, heads) = (rng.random_range(1..30), rng.random_range(1..4));
        let (seq, att) = common::random_attention(&mut rng, n_words, heads);
        let top_k = rng.random_range(1..8);
        let content = (case % 2 == 1 && seq.text.len() > 4).then(|| (seq.text.len() / 4, seq.text.len()));
        let got = extract_salient_tokens(&att, &seq, top_k, &stop, content);
        let want = common::salience_oracle(&att, &seq, top_k, &stop, content);
        let flat: Vec<(String, f64, (usize, usize))> = got.iter().map(|t| (t.word.clone(), t.score, t.char_span)).collect();
        ensure!(flat.len() == want.len(), "case {case}: {} tokens, oracle {}", flat.len(), want.len());
        for (g, w) in flat.iter().zip(&want) {
            ensure!(g.0 == w.0 && g.2 == w.2 && (g.1 - w.1).abs() <= 1e-12, "case {case}: {g:?} != {w:?}");
        }
        if let Some(first) = got.first() {
            ensure!(first.score == 1.0, "case {case}: top score {}", first.score);
            nonempty += 1;
        }
    }
    Ok(format!("100 fixtures, {nonempty} non-empty"))
}

fn reason_truth_table() -> Outcome {
    use ReasonKind::*;
    let lex = ReasonLexicons::default();
    let base = "The regional council met on Tuesday and approved the revised transit budget after a long public hearing";
    let cases: Vec<(&str, String, f64, Vec<ReasonKind>)> = vec![
        ("sensational lexicon", format!("{base} in a shocking vote."), 0.9, vec![SensationalistLanguage]),
        ("sensational, case-insensitive", format!("{base} in a Shocking vote."), 0.9, vec![SensationalistLanguage]),
        ("vague lexicon", format!("{base}, reportedly."), 0.9, vec![VagueAttribution]),
        ("style: exclamations", format!("{base}! Then they left! Quickly!"), 0.9, vec![StyleMismatch]),
        ("style: all caps", format!("{base} with THE BIG VOTE."), 0.9, vec![StyleMismatch]),
        ("style: second person", format!("{base} and you should know your rights."), 0.9, vec![StyleMismatch]),
        ("clean REAL", format!("{base}."), 0.9, vec![]),
        ("clean REAL, low band", format!("{base}."), 0.6, vec![]),
        ("high fake prob, no pattern", format!("{base}."), 0.2, vec![FactualInconsistency]),
        ("high fake prob with pattern", format!("{base} in a shocking vote."), 0.1, vec![SensationalistLanguage]),
        ("FAKE fallback below threshold", format!("{base}."), 0.4, vec![FactualInconsistency]),
        ("FAKE fallback at 0.5", format!("{base}."), 0.5, vec![FactualInconsistency]),
    ];
    let mut fired = [false; 4];
    for (name, text, p, want) in &cases {
        let verdict = Verdict::from_prob_real(*p);
        let got: Vec<ReasonKind> = classify_reasons(text, &verdict, &[], &lex).into_iter().map(|r| r.code).collect();
        ensure!(&got == want, "{name}: {got:?} != {want:?}");
        ensure!(verdict.predicted_label == Label::Real || !got.is_empty(), "{name}: FAKE without reason");
        for k in got {
            fired[ReasonKind::ALL.iter().position(|&a| a == k).unwrap()] = true;
        }
    }
    ensure!(fired.iter().all(|&f| f), "not every code fired");
    Ok(format!("{} cases, all 4 codes exercised", cases.len()))
}

fn goldens() -> Outcome {
    let cases = common::golden_cases();
    let failures: Vec<String> = cases.iter().filter_map(|(n, c)| common::check_golden(n, c).err()).collect();
    ensure!(failures.is_empty(), "{}", failures.join("; "));
    let prompts = cases.iter().filter(|c| c.0.starts_with("prompt_")).count();
    let vafs = cases.iter().filter(|c| c.0.starts_with("vaf_")).count();
    ensure!(prompts == 8 && vafs == 2, "expected 8 prompts and 2 vaf renderings");
    Ok(format!("{} files byte-identical", cases.len()))
}

const TRACE: [[f64; 4]; 3] = [[0.7, 0.55, 0.4, 0.9], [0.3, 0.65, 0.2, 0.45], [0.52, 0.58, 0.1, 0.2]];

fn trace_config() -> LoopConfig {
    LoopConfig { rounds: 3, cache_capacity: 2, update_every: 2, tau_fool: 0.5, tau_sft: 0.6, ..Default::default() }
}

fn trace_run() -> Result<(Vec<RoundLog>, common::ScriptedGenerator), String> {
    let h = common::Harness::new(common::trace_store());
    let env = h.env(None, Exec::Parallel);
    let mut det = common::ScriptedDetector::new(TRACE.iter().map(|r| r.to_vec()).collect());
    let mut gen = common::ScriptedGenerator::default();
    let logs = training::run(trace_config(), &env, &mut det, &mut gen).map_err(|e| e.to_string())?;
    Ok((logs, gen))
}

fn ids(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn algorithm_trace() -> Outcome {
    let (logs, gen) = trace_run()?;
    ensure!(logs.len() == 3, "{} rounds", logs.len());
    let expect: [(&[&str], &[&str], &[(&str, usize)], Option<&[&str]>); 3] = [
        (&["s1", "s2", "s4"], &["s1", "s4"], &[("s1", 1), ("s4", 1)], None),
        (&["s2"], &["s2"], &[("s4", 1), ("s2", 2)], Some(&["s2"])),
        (&["s1", "s2"], &[], &[("s4", 1), ("s2", 2)], None),
    ];
    for (log, (fooled, success, cache, sft)) in logs.iter().zip(expect) {
        let t = log.round;
        ensure!(log.fooled == ids(fooled), "round {t}: fooled {:?}", log.fooled);
        ensure!(log.successes == ids(success), "round {t}: successes {:?}", log.successes);
        ensure!(log.successes.iter().all(|s| log.fooled.contains(s)), "round {t}: success not fooled");
        let got_cache: Vec<(String, usize)> = log.cache.iter().map(|c| (c.source_id.clone(), c.round)).collect();
        let want_cache: Vec<(String, usize)> = cache.iter().map(|(s, r)| (s.to_string(), *r)).collect();
        ensure!(got_cache == want_cache, "round {t}: cache {got_cache:?}");
        let probs: Vec<f64> = log.articles.iter().map(|a| a.prob_real.unwrap()).collect();
        ensure!(probs == TRACE[t - 1], "round {t}: probs {probs:?}");
        match sft {
            Some(want) => ensure!(
                log.generator.outcome.is_some() && log.generator.examples == ids(want),
                "round {t}: expected SFT on {want:?}, got {:?}",
                log.generator
            ),
            None => ensure!(log.generator.outcome.is_none(), "round {t}: SFT ran"),
        }
    }
    ensure!(logs[0].generator.skipped.as_deref().is_some_and(|s| s.contains("multiple of 2")), "round 1 skip reason");
    ensure!(logs[2].generator.skipped.as_deref() == Some("no successful rewrites"), "round 3 skip reason");
    ensure!(gen.sft_batches.len() == 1 && gen.sft_batches[0].len() == 1, "sft batches {:?}", gen.sft_batches);
    ensure!(gen.sft_batches[0][0].ends_with("Version 2."), "round 2 SFT target {:?}", gen.sft_batches[0]);

    // causality: round t embeds report t-1 rendered with cache t-1
    ensure!(logs[0].articles.iter().all(|a| !a.user_prompt.contains(FEEDBACK_HEADER)), "feedback in round 1");
    for t in 1..logs.len() {
        let exemplars: Vec<Exemplar> =
            logs[t - 1].cache.iter().map(|c| Exemplar { text: c.text.clone(), prob_real: c.prob_real }).collect();
        for a in &logs[t].articles {
            let prev = logs[t - 1].articles.iter().find(|p| p.source_id == a.source_id).unwrap();
            let report = prev.vaf.as_ref().ok_or("missing report")?;
            ensure!(report.round == t, "report round {}", report.round);
            ensure!(
                a.user_prompt.contains(&vaf::render_feedback(report, &exemplars)),
                "round {}: {} prompt lacks previous report",
                t + 1,
                a.source_id
            );
        }
    }
    Ok("3 rounds match the hand trace".into())
}

fn loss_agreement() -> Outcome {
    let (logs, _) = trace_run()?;
    let real = 0.8;
    let mut worst = 0.0f64;
    for log in &logs {
        let fakes = &TRACE[log.round - 1];
        let terms: Vec<f64> =
            fakes.iter().map(|&p| -(1.0 - p).ln()).chain(std::iter::repeat_n(-f64::ln(real), 4)).collect();
        let want = terms.iter().sum::<f64>() / terms.len() as f64;
        let also: f64 = fakes.iter().map(|&p| cross_entropy(Label::Fake, p)).sum::<f64>() / 8.0
            + 4.0 * cross_entropy(Label::Real, real) / 8.0;
        ensure!(log.detector_examples == 8, "round {}: {} examples", log.round, log.detector_examples);
        let diff = (log.detector_loss - want).abs();
        worst = worst.max(diff);
        ensure!(diff <= 1e-6 && (also - want).abs() <= 1e-6, "round {}: loss {} vs {want}", log.round, log.detector_loss);
    }
    ensure!(LoopConfig::default().kl_weight == 0.01, "default kl weight");
    let o = logs[1].generator.outcome.as_ref().ok_or("round 2 has no SFT outcome")?;
    ensure!(o.ce_loss == 1.2 && o.kl_value == 0.5 && o.kl_weight == 0.01, "components {o:?}");
    ensure!(o.total == 1.2 + 0.01 * 0.5, "total {} != {}", o.total, 1.2 + 0.01 * 0.5);
    Ok(format!("max loss deviation {worst:e}, generator total {}", o.total))
}

fn closed_loop() -> Outcome {
    let h = common::Harness::fixture();
    let env = h.env(None, Exec::Parallel);
    let mut det = StubDetector::new(StubDetectorSettings::default());
    let mut gen = StubGenerator::new(StubGeneratorSettings { inject_marker: true, ..Default::default() });
    let cfg = LoopConfig { rounds: 5, detector_lr: 1e-3, ..Default::default() };
    let logs = training::run(cfg, &env, &mut det, &mut gen).map_err(|e| e.to_string())?;
    let rates: Vec<f64> = logs.iter().map(|l| l.fool_rate).collect();
    ensure!(rates.len() == 5, "{} rounds", rates.len());
    ensure!(rates.windows(2).all(|w| w[1] <= w[0]), "fool_rate increased: {rates:?}");
    ensure!(rates[4] < rates[0], "no feedback signal: {rates:?}");
    Ok(format!("fool_rate {rates:?}"))
}

fn ablation_structure() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let fail = |e: cli::CliError| e.to_string();
    cli::cmd_prepare(
        &common::fixture("corpus.jsonl"),
        &dir.path().join("corpus"),
        Some(&common::fixture("seeds.txt")),
        3,
        Some(0.9),
    )
    .map_err(fail)?;
    let mut config = RunConfig::default();
    config.paths.corpus_dir = dir.path().join("corpus");
    config.paths.index_dir = dir.path().join("index");
    config.paths.run_dir = dir.path().join("runs");
    config.training.rounds = 3;
    config.training.detector_lr = 1e-3;
    cli::cmd_build_index(&config).map_err(fail)?;
    let matrices = [
        ("retrieval", [("G-/D-", false, false), ("G+/D-", true, false), ("G-/D+", false, true), ("G+/D+", true, true)]),
        ("feedback", [("ours", true, true), ("no_vaf", false, true), ("no_fewshot", true, false), ("no_both", false, false)]),
    ];
    for (axis, want) in matrices {
        let cells = cli::cmd_ablate(&config, axis).map_err(fail)?;
        ensure!(cells.len() == 4, "{axis}: {} cells", cells.len());
        let mut seed_sets = Vec::new();
        for (cell, (name, a, b)) in cells.iter().zip(want) {
            let v = &cell.variant;
            ensure!(v.name == name, "{axis}: cell {} where {name} expected", v.name);
            let flags = if axis == "retrieval" {
                (v.generator_retrieval, v.detector_retrieval, v.vaf_enabled && v.fewshot_enabled)
            } else {
                (v.vaf_enabled, v.fewshot_enabled, v.generator_retrieval && v.detector_retrieval)
            };
            ensure!(flags == (a, b, true), "{axis}/{name}: switches {flags:?}");
            ensure!(cell.error.is_none(), "{axis}/{name}: {:?}", cell.error);
            let (first, last) = (cell.first_round_auc.ok_or("no first auc")?, cell.last_round_auc.ok_or("no last auc")?);
            ensure!(cell.delta == Some(last - first), "{axis}/{name}: delta {:?}", cell.delta);
            let log = training::read_round_log(&config.paths.run_dir.join(&v.slug), 1).map_err(|e| e.to_string())?;
            seed_sets.push(log.articles.iter().map(|a| a.source_id.clone()).collect::<Vec<_>>());
        }
        ensure!(seed_sets.windows(2).all(|w| w[0] == w[1]), "{axis}: seeds differ across cells");
    }
    Ok("retrieval and feedback matrices, 4 cells each, shared seeds".into())
}

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "AUC oracle suite", budget: Some(Duration::from_secs(5)), run: auc_suite },
        Criterion { id: 2, name: "retrieval exactness", budget: Some(Duration::from_secs(30)), run: retrieval_exactness },
        Criterion { id: 3, name: "salience oracle", budget: Some(Duration::from_secs(5)), run: salience_oracle },
        Criterion { id: 4, name: "reason-rule truth table", budget: None, run: reason_truth_table },
        Criterion { id: 5, name: "template goldens", budget: None, run: goldens },
        Criterion { id: 6, name: "loop trace conformance", budget: Some(Duration::from_secs(10)), run: algorithm_trace },
        Criterion { id: 7, name: "loss agreement", budget: None, run: loss_agreement },
        Criterion { id: 8, name: "closed-loop signal", budget: None, run: closed_loop },
        Criterion { id: 9, name: "ablation structure", budget: Some(Duration::from_secs(60)), run: ablation_structure },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let outcome = match (outcome, c.budget) {
            (Ok(_), Some(b)) if elapsed > b => Err(format!("took {elapsed:.2?}, budget {b:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("[PASS] {}. {}: {detail} ({elapsed:.2?})", c.id, c.name),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {}. {}: {why} ({elapsed:.2?})", c.id, c.name);
            }
        }
    }
    println!("[SKIP] 10. real-model smoke run: no real encoder or causal LM adapter is built in; not CI-gated");
    println!("{} passed, {failed} failed, 1 skipped", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
