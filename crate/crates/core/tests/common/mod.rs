#![allow(dead_code)]

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use adversarial_news::backends::{
    Attention, BackendError, ClassifierOutput, DecodeParams, DetectorBackend, GeneratorBackend, SftExample, SftLosses,
    SftParams, StubDetector, StubDetectorSettings, StubEmbedding, StubEmbeddingSettings, TokenSequence,
};
use adversarial_news::corpus::{self, CorpusStore, InputFormat};
use adversarial_news::prompts::extract_article;
use adversarial_news::retrieval::{self, Metric, VectorIndex};
use adversarial_news::training::{BackendRecord, Environment, RetrievalContext};
use adversarial_news::vaf::{ReasonLexicons, Stopwords};
use adversarial_news::{Exec, Label};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Compares `actual` with a committed golden file; `UPDATE_GOLDEN=1`
/// rewrites it instead.
pub fn check_golden(name: &str, actual: &str) -> Result<(), String> {
    let path = golden_dir().join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::create_dir_all(golden_dir()).unwrap();
        fs::write(&path, actual).unwrap();
        return Ok(());
    }
    let expected = fs::read_to_string(&path).map_err(|e| format!("{}: {e} (run with UPDATE_GOLDEN=1)", path.display()))?;
    if expected == actual {
        Ok(())
    } else {
        let line = expected.lines().zip(actual.lines()).position(|(a, b)| a != b).map_or(0, |i| i + 1);
        Err(format!("{name} differs from golden (first differing line {line})"))
    }
}

/// The fixture corpus with seeds excluded and duplicates removed.
pub fn fixture_store() -> CorpusStore {
    let file = fs::File::open(fixture("corpus.jsonl")).unwrap();
    let store = corpus::ingest(file, InputFormat::Jsonl).unwrap().store;
    let seeds = corpus::read_id_list(&fs::read_to_string(fixture("seeds.txt")).unwrap());
    let (store, unknown) = corpus::exclude_seeds(store, &seeds);
    assert!(unknown.is_empty());
    corpus::deduplicate(store, 3, 0.9).unwrap()
}

/// Store, index, and lexical resources for loop runs.
pub struct Harness {
    pub store: CorpusStore,
    pub index: VectorIndex,
    pub embedder: StubEmbedding,
    pub lexicons: ReasonLexicons,
    pub stopwords: Stopwords,
}

impl Harness {
    pub fn new(store: CorpusStore) -> Self {
        let embedder = StubEmbedding::new(StubEmbeddingSettings::default());
        let index = retrieval::build_index(&store, &embedder, Metric::InnerProduct).unwrap();
        Harness { store, index, embedder, lexicons: ReasonLexicons::default(), stopwords: Stopwords::default() }
    }

    pub fn fixture() -> Self {
        Harness::new(fixture_store())
    }

    pub fn env<'a>(&'a self, run_dir: Option<&'a Path>, exec: Exec) -> Environment<'a> {
        Environment {
            store: &self.store,
            retrieval: Some(RetrievalContext { index: &self.index, embedder: &self.embedder }),
            stopwords: &self.stopwords,
            lexicons: &self.lexicons,
            exec,
            run_dir,
            backends: BackendRecord { detector: "stub".into(), generator: "stub".into(), ..Default::default() },
        }
    }
}

// ---- oracles ----

/// Exhaustive pairwise Mann-Whitney estimate.
pub fn auc_pairwise(labels: &[u8], scores: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (i, &li) in labels.iter().enumerate() {
        if li != 1 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            pairs += 1;
            total += if scores[i] > scores[j] {
                1.0
            } else if scores[i] == scores[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    total / pairs as f64
}

/// Scores every row and fully sorts by (score desc, id asc).
pub fn brute_force_top_k(rows: &[(String, Vec<f32>)], query: &[f32], k: usize) -> Vec<(String, f64)> {
    let mut scored: Vec<(String, f64)> = rows
        .iter()
        .map(|(id, v)| {
            let mut s = 0.0f64;
            for i in 0..v.len() {
                s += f64::from(v[i]) * f64::from(query[i]);
            }
            (id.clone(), s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// Straight-line salience: head-mean CLS row, special tokens zeroed, word
/// sums, filter, rank, max-normalize.
pub fn salience_oracle(
    att: &Attention,
    seq: &TokenSequence,
    top_k: usize,
    stopwords: &Stopwords,
    content: Option<(usize, usize)>,
) -> Vec<(String, f64, (usize, usize))> {
    let (lo, hi) = content.unwrap_or((0, seq.text.len()));
    let mut words: Vec<(usize, f64, usize)> = Vec::new();
    for (w, &(s, e)) in seq.words.iter().enumerate() {
        let mut m = 0.0f64;
        let mut has_token = false;
        for (t, tok) in seq.tokens.iter().enumerate() {
            if tok.word != Some(w) || tok.special {
                continue;
            }
            has_token = true;
            let mut sum = 0.0f64;
            for h in 0..att.heads() {
                sum += f64::from(att.row(h, seq.cls_index)[t]);
            }
            m += sum / att.heads() as f64;
        }
        let text = &seq.text[s..e];
        let punct = text.chars().all(|c| !c.is_alphanumeric());
        if has_token && m > 0.0 && s >= lo && e <= hi && !punct && !stopwords.contains(text) {
            words.push((w, m, s));
        }
    }
    // stable sort keeps span order among equal masses
    words.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    words.truncate(top_k);
    let max = match words.first() {
        Some(w) => w.1,
        None => return Vec::new(),
    };
    words
        .into_iter()
        .map(|(w, m, _)| {
            let (s, e) = seq.words[w];
            (seq.text[s..e].to_string(), m / max, (s - lo, e - lo))
        })
        .collect()
}

// ---- scripted backends for hand-traced runs ----

/// Emits `"<article> Version <n>."`, where n counts calls per article.
#[derive(Default)]
pub struct ScriptedGenerator {
    calls: Mutex<HashMap<String, usize>>,
    pub sft_batches: Vec<Vec<String>>,
}

impl GeneratorBackend for ScriptedGenerator {
    fn identifier(&self) -> String {
        "scripted-generator".into()
    }

    fn max_concurrency(&self) -> usize {
        4
    }

    fn generate(&self, _system: &str, user: &str, _params: &DecodeParams) -> Result<String, BackendError> {
        let article = extract_article(user).ok_or_else(|| BackendError::Failed("no article".into()))?.to_string();
        let mut calls = self.calls.lock().unwrap();
        let n = calls.entry(article.clone()).or_insert(0);
        *n += 1;
        Ok(format!("{article} Version {n}."))
    }

    fn sft_round(&mut self, examples: &[SftExample], _params: &SftParams) -> Result<SftLosses, BackendError> {
        self.sft_batches.push(examples.iter().map(|e| e.target.clone()).collect());
        Ok(SftLosses { ce_loss: 1.2, kl_value: 0.5 })
    }

    fn save(&self, _dir: &Path) -> Result<(), BackendError> {
        Ok(())
    }

    fn load(&mut self, _dir: &Path) -> Result<(), BackendError> {
        Ok(())
    }
}

/// Reads the seed tag `Tn` and `Version r` out of the input and returns
/// `table[r - 1][n - 1]`; reals score `real_prob`. Tokenization and attention
/// come from the stub detector.
pub struct ScriptedDetector {
    pub inner: StubDetector,
    pub table: Vec<Vec<f64>>,
    pub real_prob: f64,
}

impl ScriptedDetector {
    pub fn new(table: Vec<Vec<f64>>) -> Self {
        ScriptedDetector { inner: StubDetector::new(StubDetectorSettings::default()), table, real_prob: 0.8 }
    }

    pub fn score(&self, text: &str) -> f64 {
        let article = text.rsplit("\n\n").next().unwrap_or(text);
        let tag = article.split_whitespace().find_map(|w| w.strip_prefix('T')?.trim_end_matches('.').parse::<usize>().ok());
        let version = article
            .split("Version ")
            .nth(1)
            .and_then(|r| r.trim_end_matches('.').trim().parse::<usize>().ok());
        match (tag, version) {
            (Some(t), Some(r)) => self.table[r - 1][t - 1],
            _ => self.real_prob,
        }
    }
}

impl DetectorBackend for ScriptedDetector {
    fn identifier(&self) -> String {
        "scripted-detector".into()
    }

    fn max_length(&self) -> usize {
        512
    }

    fn tokenize(&self, text: &str) -> TokenSequence {
        self.inner.tokenize(text)
    }

    fn classify(&self, tokens: &TokenSequence) -> Result<ClassifierOutput, BackendError> {
        let mut out = self.inner.classify(tokens)?;
        out.prob_real = self.score(&tokens.text);
        out.prob_fake = 1.0 - out.prob_real;
        Ok(out)
    }

    fn train_step(&mut self, batch: &[(TokenSequence, Label)], _lr: f64) -> Result<Vec<f64>, BackendError> {
        Ok(batch.iter().map(|(t, _)| self.score(&t.text)).collect())
    }

    fn save(&self, _dir: &Path) -> Result<(), BackendError> {
        Ok(())
    }

    fn load(&mut self, _dir: &Path) -> Result<(), BackendError> {
        Ok(())
    }
}

/// Four seed articles tagged T1..T4, a small retrieval corpus, and no
/// evaluation split.
pub fn trace_store() -> CorpusStore {
    use adversarial_news::{Article, Split};
    let mut articles = vec![
        Article::new("s1", "T1 The council in Springfield approved a recycling plan on Monday.").with_split(Split::Train),
        Article::new("s2", "T2 The hospital in Dalton opened a new wing on Tuesday.").with_split(Split::Train),
        Article::new("s3", "T3 The school board in Maplewood extended the year by five days.").with_split(Split::Train),
        Article::new("s4", "T4 The port in Baymouth reported higher container traffic this quarter.").with_split(Split::Train),
    ];
    for (i, t) in ["A bridge in Riverton reopened after repairs.", "Voters in Lakeside will elect a mayor.", "Farmers near Westbury harvested record wheat."]
        .iter()
        .enumerate()
    {
        articles.push(Article::new(format!("c{i}"), *t));
    }
    CorpusStore::from_articles(articles).unwrap()
}

// ---- random fixture builders ----

pub const VOCAB: &[&str] = &[
    "the", "council", "of", "Springfield", "approved", "a", "budget", "on", "Monday", ".", ",", "and", "shocking",
    "extraordinarily", "reportedly", "mayor", "had", "said", "it", "was", "Northbridge", "!", "unbelievable", "–",
];

/// A stub-tokenized sentence plus random CLS rows (one per head), some
/// entries zero, each row normalized.
pub fn random_attention(rng: &mut impl rand::Rng, n_words: usize, heads: usize) -> (TokenSequence, Attention) {
    use rand::seq::IndexedRandom;
    let words: Vec<&str> = (0..n_words).map(|_| *VOCAB.choose(rng).unwrap()).collect();
    let text = words.join(" ");
    let det = StubDetector::new(StubDetectorSettings { max_piece_chars: 4, ..Default::default() });
    let seq = det.tokenize(&text);
    let len = seq.len();
    let rows: Vec<Vec<f32>> = (0..heads)
        .map(|_| {
            let raw: Vec<f32> = (0..len)
                .map(|_| if rng.random_bool(0.2) { 0.0 } else { (rng.random_range(1..=8) as f32) / 8.0 })
                .collect();
            let total: f32 = raw.iter().sum::<f32>().max(f32::MIN_POSITIVE);
            raw.into_iter().map(|x| x / total).collect()
        })
        .collect();
    let att = Attention::from_query_rows(len, seq.cls_index, &rows).unwrap();
    (seq, att)
}

// ---- golden cases ----

pub fn golden_report() -> adversarial_news::vaf::VafReport {
    use adversarial_news::detector::Verdict;
    use adversarial_news::vaf::{ReasonCode, ReasonKind, SalientToken, VafReport};
    let tokens = vec![
        SalientToken { word: "shocking".into(), score: 1.0, char_span: (5, 13) },
        SalientToken { word: "Springfield".into(), score: 0.625, char_span: (34, 45) },
        SalientToken { word: "reportedly".into(), score: 0.25, char_span: (50, 60) },
    ];
    let reasons = vec![
        ReasonCode::new(ReasonKind::SensationalistLanguage, vec!["shocking".into()]),
        ReasonCode::new(ReasonKind::VagueAttribution, vec!["reportedly".into()]),
    ];
    VafReport::new(3, Verdict::from_prob_real(0.18), tokens, reasons)
}

pub fn golden_passages() -> Vec<adversarial_news::retrieval::RetrievedPassage> {
    use adversarial_news::retrieval::RetrievedPassage;
    vec![
        RetrievedPassage { article_id: "c001".into(), text: "The county board met on Tuesday to review the water plan.".into(), score: 0.91, rank: 1 },
        RetrievedPassage { article_id: "c007".into(), text: "Officials said the bridge repairs would finish in May.".into(), score: 0.77, rank: 2 },
    ]
}

pub fn golden_exemplars() -> Vec<adversarial_news::vaf::Exemplar> {
    use adversarial_news::vaf::Exemplar;
    vec![
        Exemplar { text: "The town council approved the library budget on Monday.".into(), prob_real: 0.83 },
        Exemplar { text: "A regional court scheduled the hearing for next week.".into(), prob_real: 0.71 },
    ]
}

/// Every frozen rendering as (file name, content).
pub fn golden_cases() -> Vec<(String, String)> {
    use adversarial_news::detector::assemble_input;
    use adversarial_news::generator::assemble_prompt;
    use adversarial_news::vaf::render_feedback;
    use adversarial_news::Article;

    let article = Article::new("g1", fs::read_to_string(fixture("article_shocking.txt")).unwrap().trim().to_string());
    let report = golden_report();
    let passages = golden_passages();
    let exemplars = golden_exemplars();
    let mut out = Vec::new();
    for fb in [false, true] {
        for ex in [false, true] {
            for ctx in [false, true] {
                let p = assemble_prompt(
                    &article,
                    &passages,
                    fb.then_some(&report),
                    if ex { &exemplars } else { &[] },
                    ctx,
                );
                let name = format!("prompt_fb{}_ex{}_ctx{}.txt", u8::from(fb), u8::from(ex), u8::from(ctx));
                out.push((name, format!("{}\n----- USER -----\n{}", p.system, p.user)));
            }
        }
    }
    out.push(("vaf_plain.txt".into(), render_feedback(&report, &[])));
    out.push(("vaf_exemplars.txt".into(), render_feedback(&report, &exemplars)));
    let det = StubDetector::new(StubDetectorSettings::default());
    for (name, rag) in [("detector_evidence.txt", true), ("detector_plain.txt", false)] {
        let input = assemble_input(&article.content, &passages, rag, &det).unwrap();
        out.push((name.into(), input.rendered));
    }
    out
}
