//! Evaluation: ROC-AUC, the ablation matrices, and training-dynamics
//! reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::training::{read_round_log, LoopConfig, RoundLog, ROUNDS_DIR};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("ROC-AUC is undefined without both classes ({positives} positive, {negatives} negative)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("score {score} of {id:?} is outside [0, 1]")]
    InvalidScore { id: String, score: f64 },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

/// One scored example; `label` is 1 for real, 0 for fake.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    pub id: String,
    pub label: u8,
    pub score: f64,
}

impl ScoredExample {
    pub fn new(id: impl Into<String>, label: u8, score: f64) -> Self {
        ScoredExample { id: id.into(), label, score }
    }
}

/// Mann-Whitney statistic over (positive, negative) pairs, ties counting
/// one half. Computed from midranks.
pub fn roc_auc(examples: &[ScoredExample]) -> Result<f64, EvalError> {
    if let Some(bad) = examples.iter().find(|e| !(0.0..=1.0).contains(&e.score)) {
        return Err(EvalError::InvalidScore { id: bad.id.clone(), score: bad.score });
    }
    let positives = examples.iter().filter(|e| e.label == 1).count();
    let negatives = examples.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::SingleClass { positives, negatives });
    }
    let mut order: Vec<&ScoredExample> = examples.iter().collect();
    order.sort_by(|a, b| a.score.total_cmp(&b.score));

    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && order[j + 1].score == order[i].score {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let midrank = (i + j + 2) as f64 / 2.0;
        rank_sum += midrank * order[i..=j].iter().filter(|e| e.label == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Percent with two decimals, as tables report it.
pub fn format_auc(auc: Option<f64>) -> String {
    auc.map(|a| format!("{:.2}", a * 100.0)).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    Retrieval,
    Feedback,
}

impl std::str::FromStr for AblationAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "retrieval" => Ok(AblationAxis::Retrieval),
            "feedback" => Ok(AblationAxis::Feedback),
            other => Err(format!("unknown ablation axis {other:?} (expected retrieval or feedback)")),
        }
    }
}

/// One configuration of an ablation matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    /// Directory-safe form of `name`.
    pub slug: String,
    pub generator_retrieval: bool,
    pub detector_retrieval: bool,
    pub vaf_enabled: bool,
    pub fewshot_enabled: bool,
}

impl AblationVariant {
    pub fn apply(&self, base: &LoopConfig) -> LoopConfig {
        LoopConfig {
            generator_retrieval: self.generator_retrieval,
            detector_retrieval: self.detector_retrieval,
            vaf_enabled: self.vaf_enabled,
            fewshot_enabled: self.fewshot_enabled,
            ..base.clone()
        }
    }
}

/// The four cells of an axis. The retrieval axis keeps the base feedback
/// flags; the feedback axis runs with retrieval on both sides.
pub fn variants(axis: AblationAxis, base: &LoopConfig) -> Vec<AblationVariant> {
    match axis {
        AblationAxis::Retrieval => [(false, false), (true, false), (false, true), (true, true)]
            .into_iter()
            .map(|(g, d)| AblationVariant {
                name: format!("G{}/D{}", if g { '+' } else { '-' }, if d { '+' } else { '-' }),
                slug: format!("g{}_d{}", g as u8, d as u8),
                generator_retrieval: g,
                detector_retrieval: d,
                vaf_enabled: base.vaf_enabled,
                fewshot_enabled: base.fewshot_enabled,
            })
            .collect(),
        AblationAxis::Feedback => [("ours", true, true), ("no_vaf", false, true), ("no_fewshot", true, false), ("no_both", false, false)]
            .into_iter()
            .map(|(name, vaf, fewshot)| AblationVariant {
                name: name.into(),
                slug: name.into(),
                generator_retrieval: true,
                detector_retrieval: true,
                vaf_enabled: vaf,
                fewshot_enabled: fewshot,
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: AblationVariant,
    /// Measured after the first round's detector update.
    pub first_round_auc: Option<f64>,
    pub last_round_auc: Option<f64>,
    pub delta: Option<f64>,
    pub rounds: usize,
    pub error: Option<String>,
}

impl AblationCell {
    pub fn from_logs(variant: AblationVariant, logs: &[RoundLog]) -> Self {
        let first_round_auc = logs.first().and_then(|l| l.eval_auc);
        let last_round_auc = logs.last().and_then(|l| l.eval_auc);
        let delta = first_round_auc.zip(last_round_auc).map(|(f, l)| l - f);
        AblationCell { variant, first_round_auc, last_round_auc, delta, rounds: logs.len(), error: None }
    }

    pub fn failed(variant: AblationVariant, error: String) -> Self {
        AblationCell { variant, first_round_auc: None, last_round_auc: None, delta: None, rounds: 0, error: Some(error) }
    }
}

/// Runs every cell of `axis` through `runner`. All cells share the base
/// config's seed and sampled articles. A failed run yields a failed cell.
pub fn ablation_matrix<F>(base: &LoopConfig, axis: AblationAxis, exec: Exec, runner: F) -> Vec<AblationCell>
where
    F: Fn(&AblationVariant, LoopConfig) -> Result<Vec<RoundLog>, String> + Sync + Send,
{
    let cells = variants(axis, base);
    exec.map(&cells, |v| match runner(v, v.apply(base)) {
        Ok(logs) => AblationCell::from_logs(v.clone(), &logs),
        Err(e) => AblationCell::failed(v.clone(), e),
    })
}

pub fn ablation_csv(cells: &[AblationCell]) -> String {
    let mut out = String::from(
        "config,generator_retrieval,detector_retrieval,vaf,fewshot,first_round_auc,last_round_auc,delta,status\n",
    );
    for c in cells {
        let v = &c.variant;
        let delta = c.delta.map(|d| format!("{:+.2}", d * 100.0)).unwrap_or_default();
        let status = if c.error.is_some() { "failed" } else { "ok" };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            v.name,
            v.generator_retrieval as u8,
            v.detector_retrieval as u8,
            v.vaf_enabled as u8,
            v.fewshot_enabled as u8,
            format_auc(c.first_round_auc),
            format_auc(c.last_round_auc),
            delta,
            status
        )
        .unwrap();
    }
    out
}

/// Per-round AUC of one run; `None` marks a missing or unscored round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub points: Vec<(usize, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsReport {
    pub rounds: usize,
    pub series: Vec<Series>,
}

fn logged_rounds(run_dir: &Path) -> Result<Vec<usize>, EvalError> {
    let dir = run_dir.join(ROUNDS_DIR);
    let entries = fs::read_dir(&dir).map_err(|e| EvalError::Io { path: dir.clone(), message: e.to_string() })?;
    let mut rounds: Vec<usize> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.strip_suffix(".jsonl")?.parse().ok())
        .collect();
    rounds.sort_unstable();
    Ok(rounds)
}

/// Collects the eval AUC series of each `(name, run_dir)`. The round range
/// is `1..=rounds`, or up to the latest round any run logged; rounds a run
/// lacks stay empty.
pub fn dynamics_report(runs: &[(String, PathBuf)], rounds: Option<usize>) -> Result<DynamicsReport, EvalError> {
    let mut found = Vec::with_capacity(runs.len());
    for (name, dir) in runs {
        let logged = logged_rounds(dir)?;
        let mut aucs = Vec::with_capacity(logged.len());
        for t in logged {
            let log = read_round_log(dir, t).map_err(|e| EvalError::Io { path: dir.clone(), message: e.to_string() })?;
            aucs.push((t, log.eval_auc));
        }
        found.push((name.clone(), aucs));
    }
    let rounds = rounds.unwrap_or_else(|| found.iter().flat_map(|(_, a)| a.iter().map(|p| p.0)).max().unwrap_or(0));
    let series = found
        .into_iter()
        .map(|(name, aucs)| Series {
            name,
            points: (1..=rounds).map(|t| (t, aucs.iter().find(|p| p.0 == t).and_then(|p| p.1))).collect(),
        })
        .collect();
    Ok(DynamicsReport { rounds, series })
}

impl DynamicsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("series,round,roc_auc\n");
        for s in &self.series {
            for (t, auc) in &s.points {
                writeln!(out, "{},{},{}", s.name, t, format_auc(*auc)).unwrap();
            }
        }
        out
    }

    /// A static line chart. Gaps break the line rather than being bridged.
    pub fn to_svg(&self) -> String {
        const W: f64 = 640.0;
        const H: f64 = 400.0;
        const PAD: f64 = 50.0;
        const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
        let values: Vec<f64> = self.series.iter().flat_map(|s| s.points.iter().filter_map(|p| p.1)).collect();
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min).min(0.5);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(lo + 0.01).min(1.0);
        let x = |t: usize| PAD + (W - 2.0 * PAD) * (t.max(1) - 1) as f64 / (self.rounds.max(2) - 1) as f64;
        let y = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - lo) / (hi - lo);

        let mut svg = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n");
        writeln!(svg, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>").unwrap();
        writeln!(svg, "<line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>", H - PAD, W - PAD, H - PAD).unwrap();
        writeln!(svg, "<line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>", H - PAD).unwrap();
        for t in 1..=self.rounds {
            writeln!(svg, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{t}</text>", x(t), H - PAD + 18.0).unwrap();
        }
        for (v, label) in [(lo, lo), (hi, hi)] {
            writeln!(svg, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{:.1}</text>", PAD - 6.0, y(v) + 4.0, label * 100.0).unwrap();
        }
        writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">Round</text>", W / 2.0, H - 10.0).unwrap();
        writeln!(svg, "<text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">ROC-AUC (%)</text>", H / 2.0, H / 2.0).unwrap();
        for (i, s) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let mut segment: Vec<String> = Vec::new();
            let flush = |segment: &mut Vec<String>, svg: &mut String| {
                if segment.len() > 1 {
                    writeln!(svg, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>", segment.join(" ")).unwrap();
                }
                segment.clear();
            };
            for (t, auc) in &s.points {
                match auc {
                    Some(v) => {
                        segment.push(format!("{:.1},{:.1}", x(*t), y(*v)));
                        writeln!(svg, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>", x(*t), y(*v)).unwrap();
                    }
                    None => flush(&mut segment, &mut svg),
                }
            }
            flush(&mut segment, &mut svg);
            let ly = PAD + 16.0 * i as f64;
            writeln!(svg, "<text x=\"{}\" y=\"{ly:.1}\" fill=\"{color}\">{}</text>", W - PAD - 100.0, s.name).unwrap();
        }
        svg.push_str("</svg>\n");
        svg
    }
}
