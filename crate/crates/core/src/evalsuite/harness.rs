//! Ablation sweeps and cross-corpus transfer.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::ScoredPrediction;
use super::report::{build_report, evaluate, EvalReport};
use super::significance::{mcnemar, McNemar};
use super::{EvalError, Result};
use crate::dataio::{Corpus, DataError, EmbeddingRecord, Split};
use crate::model::{ModelConfig, PromptSpec, Variant};
use crate::trainer::{self, train, train_corpus, with_corpus_dims, TrainConfig};

pub const CSV_HEADER: [&str; 6] = ["variant", "seed", "split", "acc", "eer", "eer_threshold"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Runs trained concurrently; results do not depend on it.
    pub jobs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { variants: Variant::ALL.to_vec(), seeds: (0..5).collect(), jobs: 1 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    /// One report per evaluated test split.
    pub reports: Vec<EvalReport>,
    #[serde(skip)]
    pub seen_predictions: Vec<ScoredPrediction>,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl RunResult {
    pub fn report(&self, split: Split) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.split == split)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; `0` for a single run.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std =
            if xs.len() < 2 { 0.0 } else { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() };
        Some(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub runs: usize,
    pub seen_acc: Option<MeanStd>,
    pub seen_eer: Option<MeanStd>,
    pub unseen_acc: Option<MeanStd>,
    pub unseen_eer: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub variant: Variant,
    /// `test_seen` predictions pooled over the seeds both variants ran.
    pub result: McNemar,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub runs: Vec<RunResult>,
    pub summary: Vec<VariantSummary>,
    /// Each non-reference variant against `satyam`, when it is part of the sweep.
    pub comparisons: Vec<Comparison>,
}

fn run_one(
    corpus: &Corpus,
    base: &ModelConfig,
    tcfg: &TrainConfig,
    prompt: &PromptSpec,
    variant: Variant,
    seed: u64,
) -> Result<RunResult> {
    let mcfg = with_corpus_dims(&ModelConfig { variant, ..base.clone() }, corpus);
    let tcfg = TrainConfig { seed, ..tcfg.clone() };
    let trained = train_corpus(corpus, &mcfg, &tcfg, prompt).map_err(Box::new)?;
    let mut reports = Vec::new();
    let mut seen_predictions = Vec::new();
    for split in [Split::TestSeen, Split::TestUnseen] {
        if !corpus.rows().iter().any(|r| r.split == split) {
            continue;
        }
        let (mut report, preds) = evaluate(&trained.params, &mcfg, prompt, corpus, split)?;
        report.seed = Some(seed);
        if split == Split::TestSeen {
            seen_predictions = preds;
        }
        reports.push(report);
    }
    Ok(RunResult { variant, seed, reports, seen_predictions, wall_time_secs: trained.log.wall_time_secs })
}

fn pooled(runs: &[&RunResult], seeds: &BTreeSet<u64>) -> Vec<ScoredPrediction> {
    runs.iter()
        .filter(|r| seeds.contains(&r.seed))
        .flat_map(|r| {
            r.seen_predictions.iter().map(move |p| ScoredPrediction { id: format!("{}/{}", r.seed, p.id), ..p.clone() })
        })
        .collect()
}

/// Trains and evaluates every `(variant, seed)` pair on `corpus`.
pub fn ablation_sweep(
    corpus: &Corpus,
    base: &ModelConfig,
    tcfg: &TrainConfig,
    prompt: &PromptSpec,
    sweep: &SweepConfig,
) -> Result<SweepReport> {
    if sweep.variants.is_empty() || sweep.seeds.is_empty() {
        return Err(EvalError::InvalidInput("a sweep needs at least one variant and one seed".into()));
    }
    let unique: BTreeSet<_> = sweep.variants.iter().collect();
    if unique.len() != sweep.variants.len() {
        return Err(EvalError::InvalidInput("duplicate variants in sweep".into()));
    }
    let plan: Vec<(Variant, u64)> =
        sweep.variants.iter().flat_map(|&v| sweep.seeds.iter().map(move |&s| (v, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(sweep.jobs.max(1)).build().expect("thread pool");
    let runs: Vec<RunResult> = pool
        .install(|| plan.par_iter().map(|&(v, s)| run_one(corpus, base, tcfg, prompt, v, s)).collect::<Result<_>>())?;

    let summary = sweep
        .variants
        .iter()
        .map(|&variant| {
            let mine: Vec<&RunResult> = runs.iter().filter(|r| r.variant == variant).collect();
            let metric = |split: Split, f: fn(&EvalReport) -> f64| {
                MeanStd::of(&mine.iter().filter_map(|r| r.report(split)).map(f).collect::<Vec<_>>())
            };
            VariantSummary {
                variant,
                runs: mine.len(),
                seen_acc: metric(Split::TestSeen, |r| r.acc),
                seen_eer: metric(Split::TestSeen, |r| r.eer),
                unseen_acc: metric(Split::TestUnseen, |r| r.acc),
                unseen_eer: metric(Split::TestUnseen, |r| r.eer),
            }
        })
        .collect();

    let mut comparisons = Vec::new();
    if sweep.variants.contains(&Variant::Satyam) {
        let seeds: BTreeSet<u64> = sweep.seeds.iter().copied().collect();
        let of = |v: Variant| runs.iter().filter(|r| r.variant == v).collect::<Vec<_>>();
        let reference = pooled(&of(Variant::Satyam), &seeds);
        if !reference.is_empty() {
            for &v in sweep.variants.iter().filter(|&&v| v != Variant::Satyam) {
                comparisons.push(Comparison { variant: v, result: mcnemar(&reference, &pooled(&of(v), &seeds))? });
            }
        }
    }
    Ok(SweepReport { runs, summary, comparisons })
}

impl SweepReport {
    pub fn summary_for(&self, variant: Variant) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == variant)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serialisable") + "\n"
    }

    /// One row per run and evaluated split.
    pub fn to_csv(&self) -> String {
        let reports: Vec<&EvalReport> = self.runs.iter().flat_map(|r| &r.reports).collect();
        reports_to_csv(&reports)
    }

    /// Bar chart of mean `test_seen` EER per variant with one-std whiskers.
    pub fn to_svg(&self) -> String {
        let bars: Vec<(String, MeanStd)> =
            self.summary.iter().filter_map(|s| s.seen_eer.map(|m| (s.variant.to_string(), m))).collect();
        eer_bar_chart(&bars)
    }

    /// Writes `sweep.json`, `runs.csv` and `eer.svg` into `dir`.
    pub fn write(&self, dir: &Path) -> std::result::Result<(), DataError> {
        std::fs::create_dir_all(dir).map_err(|e| DataError::Io { path: dir.into(), source: e })?;
        for (name, body) in [("sweep.json", self.to_json()), ("runs.csv", self.to_csv()), ("eer.svg", self.to_svg())] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| DataError::Io { path, source: e })?;
        }
        Ok(())
    }
}

pub fn reports_to_csv(reports: &[&EvalReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for r in reports {
        let seed = r.seed.map(|s| s.to_string()).unwrap_or_default();
        let row = [
            r.variant.to_string(),
            seed,
            r.split.to_string(),
            r.acc.to_string(),
            r.eer.to_string(),
            r.eer_threshold.to_string(),
        ];
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

pub fn eer_bar_chart(bars: &[(String, MeanStd)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const PAD: f64 = 48.0;
    let top = bars.iter().map(|(_, m)| m.mean + m.std).fold(1.0f64, f64::max);
    let slot = (W - 2.0 * PAD) / bars.len().max(1) as f64;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * v / top;
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#).unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">test_seen EER (%)</text>"#,
        W / 2.0
    )
    .unwrap();
    writeln!(s, r#"<line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - PAD, W - PAD, H - PAD).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="10">{top:.2}</text>"#,
        PAD - 4.0,
        y(top) + 4.0
    )
    .unwrap();
    for (i, (label, m)) in bars.iter().enumerate() {
        let x = PAD + slot * (i as f64 + 0.15);
        let bw = slot * 0.7;
        let cx = x + bw / 2.0;
        writeln!(
            s,
            r##"<rect x="{x:.1}" y="{:.1}" width="{bw:.1}" height="{:.1}" fill="#4c72b0"/>"##,
            y(m.mean),
            y(0.0) - y(m.mean)
        )
        .unwrap();
        writeln!(
            s,
            r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
            y((m.mean - m.std).max(0.0)),
            y(m.mean + m.std)
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="10">{:.2}</text>"#,
            y(m.mean + m.std) - 4.0,
            m.mean
        )
        .unwrap();
        writeln!(s, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="11">{label}</text>"#, H - PAD + 16.0).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Which slices of the two corpora a transfer run uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub test_split: Split,
    /// Restrict training records to these languages.
    pub train_languages: Option<Vec<String>>,
    /// Restrict test records to these languages.
    pub test_languages: Option<Vec<String>>,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self { test_split: Split::TestSeen, train_languages: None, test_languages: None }
    }
}

fn keep(records: Vec<EmbeddingRecord>, languages: &Option<Vec<String>>) -> Vec<EmbeddingRecord> {
    match languages {
        None => records,
        Some(ls) => records.into_iter().filter(|r| ls.contains(&r.language)).collect(),
    }
}

/// Trains on `source`'s train split and evaluates on `target`.
pub fn cross_domain(
    source: &Corpus,
    target: &Corpus,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    prompt: &PromptSpec,
    transfer: &TransferConfig,
) -> Result<(EvalReport, Vec<ScoredPrediction>)> {
    if source.dims() != target.dims() {
        return Err(EvalError::InvalidInput(format!(
            "embedding dims differ: {} has {:?}, {} has {:?}",
            source.dir.display(),
            source.dims(),
            target.dir.display(),
            target.dims()
        )));
    }
    let mcfg = with_corpus_dims(mcfg, source);
    let train_set = keep(source.split_records(&[Split::Train]), &transfer.train_languages);
    let valid = keep(source.split_records(&[Split::Valid]), &transfer.train_languages);
    let test = keep(target.split_records(&[transfer.test_split]), &transfer.test_languages);
    if test.is_empty() {
        return Err(EvalError::InvalidInput(format!(
            "corpus {} has no {} records for the requested languages",
            target.dir.display(),
            transfer.test_split
        )));
    }
    let train_codecs: BTreeSet<String> = train_set.iter().chain(&valid).filter_map(|r| r.codec_id.clone()).collect();
    let trained = train(&train_set, &valid, &mcfg, tcfg, prompt).map_err(Box::new)?;
    let preds = trainer::score_records(&test, &trained.params, &mcfg, prompt)?;
    let mut report = build_report(mcfg.variant, transfer.test_split, &test, &preds, &train_codecs)?;
    report.seed = Some(tcfg.seed);
    Ok((report, preds))
}
