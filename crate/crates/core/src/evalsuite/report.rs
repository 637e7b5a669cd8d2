//! Per-split evaluation reports.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, compute_eer, ScoredPrediction};
use super::{EvalError, Result};
use crate::dataio::{Corpus, EmbeddingRecord, Label, Split};
use crate::model::{ModelConfig, ModelParams, PromptSpec, Variant};
use crate::trainer;

pub const REPORT_VERSION: u32 = 1;

/// Metrics over one slice of a split (a codec or a language).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupMetrics {
    pub count: usize,
    pub acc: f64,
    /// Absent when the slice holds a single class.
    pub eer: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub report_version: u32,
    pub variant: Variant,
    pub seed: Option<u64>,
    pub split: Split,
    pub count: usize,
    pub acc: f64,
    pub eer: f64,
    pub eer_threshold: f64,
    /// Record counts keyed by label.
    pub label_counts: BTreeMap<String, usize>,
    /// Fakes of each codec scored against every real record of the split.
    pub by_codec: BTreeMap<String, GroupMetrics>,
    pub by_language: BTreeMap<String, GroupMetrics>,
    /// Percent of fake codec ids in this split absent from the training data.
    pub codec_novelty: f64,
}

fn group(preds: &[&ScoredPrediction]) -> Result<GroupMetrics> {
    let owned: Vec<ScoredPrediction> = preds.iter().map(|p| (*p).clone()).collect();
    let scores: Vec<(f64, Label)> = owned.iter().map(|p| (p.score, p.truth)).collect();
    let single_class = scores.iter().all(|s| s.1 == scores[0].1);
    Ok(GroupMetrics {
        count: owned.len(),
        acc: accuracy(&owned)?,
        eer: if single_class { None } else { Some(compute_eer(&scores)?.eer) },
    })
}

/// Builds a report from predictions aligned with `records`.
///
/// `train_codecs` is the set of codec ids seen in training; it only feeds
/// `codec_novelty`.
pub fn build_report(
    variant: Variant,
    split: Split,
    records: &[EmbeddingRecord],
    preds: &[ScoredPrediction],
    train_codecs: &BTreeSet<String>,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(EvalError::InvalidInput(format!("split {split} is empty")));
    }
    if records.len() != preds.len() || records.iter().zip(preds).any(|(r, p)| r.id != p.id || r.label != p.truth) {
        return Err(EvalError::InvalidInput("predictions do not line up with records".into()));
    }
    let scores: Vec<(f64, Label)> = preds.iter().map(|p| (p.score, p.truth)).collect();
    let eer = compute_eer(&scores)?;

    let mut label_counts = BTreeMap::new();
    let mut codecs: BTreeMap<String, Vec<&ScoredPrediction>> = BTreeMap::new();
    let mut languages: BTreeMap<String, Vec<&ScoredPrediction>> = BTreeMap::new();
    let reals: Vec<&ScoredPrediction> = preds.iter().filter(|p| p.truth == Label::Real).collect();
    for (r, p) in records.iter().zip(preds) {
        *label_counts.entry(r.label.to_string()).or_insert(0) += 1;
        if let Some(c) = &r.codec_id {
            codecs.entry(c.clone()).or_default().push(p);
        }
        languages.entry(r.language.clone()).or_default().push(p);
    }
    let mut by_codec = BTreeMap::new();
    for (codec, fakes) in &codecs {
        let mut m = group(fakes)?;
        let pooled: Vec<&ScoredPrediction> = reals.iter().chain(fakes).copied().collect();
        m.eer = group(&pooled)?.eer;
        by_codec.insert(codec.clone(), m);
    }
    let by_language = languages.iter().map(|(k, v)| Ok((k.clone(), group(v)?))).collect::<Result<_>>()?;
    let novel = codecs.keys().filter(|c| !train_codecs.contains(*c)).count();
    let codec_novelty = if codecs.is_empty() { 0.0 } else { 100.0 * novel as f64 / codecs.len() as f64 };

    Ok(EvalReport {
        report_version: REPORT_VERSION,
        variant,
        seed: None,
        split,
        count: records.len(),
        acc: accuracy(preds)?,
        eer: eer.eer,
        eer_threshold: eer.threshold,
        label_counts,
        by_codec,
        by_language,
        codec_novelty,
    })
}

/// Checks that the checkpoint's embedding dims match the corpus.
pub(crate) fn check_dims(cfg: &ModelConfig, corpus: &Corpus) -> Result<()> {
    let dims = corpus.dims();
    if dims != (cfg.d_w, cfg.d_t) {
        return Err(EvalError::InvalidInput(format!(
            "corpus {} has embedding dims {dims:?}, model expects ({}, {})",
            corpus.dir.display(),
            cfg.d_w,
            cfg.d_t
        )));
    }
    Ok(())
}

/// Scores every record of `split` and reports metrics against the corpus's
/// own training splits.
pub fn evaluate(
    params: &ModelParams,
    cfg: &ModelConfig,
    prompt: &PromptSpec,
    corpus: &Corpus,
    split: Split,
) -> Result<(EvalReport, Vec<ScoredPrediction>)> {
    evaluate_against(params, cfg, prompt, corpus, split, &corpus.codecs_in(&[Split::Train, Split::Valid]))
}

pub(crate) fn evaluate_against(
    params: &ModelParams,
    cfg: &ModelConfig,
    prompt: &PromptSpec,
    corpus: &Corpus,
    split: Split,
    train_codecs: &BTreeSet<String>,
) -> Result<(EvalReport, Vec<ScoredPrediction>)> {
    check_dims(cfg, corpus)?;
    let records = corpus.split_records(&[split]);
    if records.is_empty() {
        return Err(EvalError::InvalidInput(format!("corpus {} has no {split} records", corpus.dir.display())));
    }
    let preds = trainer::score_records(&records, params, cfg, prompt)?;
    let report = build_report(cfg.variant, split, &records, &preds, train_codecs)?;
    Ok((report, preds))
}

fn percent(name: &str, v: f64) -> Result<()> {
    if !(0.0..=100.0).contains(&v) {
        return Err(EvalError::InvalidInput(format!("{name} = {v} is outside [0, 100]")));
    }
    Ok(())
}

impl EvalReport {
    /// Checks version, ranges and count consistency.
    pub fn check(&self) -> Result<()> {
        if self.report_version != REPORT_VERSION {
            return Err(EvalError::InvalidInput(format!(
                "unsupported report_version {} (expected {REPORT_VERSION})",
                self.report_version
            )));
        }
        percent("acc", self.acc)?;
        percent("eer", self.eer)?;
        percent("codec_novelty", self.codec_novelty)?;
        if self.label_counts.values().sum::<usize>() != self.count {
            return Err(EvalError::InvalidInput("label counts do not sum to count".into()));
        }
        if self.by_language.values().map(|g| g.count).sum::<usize>() != self.count {
            return Err(EvalError::InvalidInput("language counts do not sum to count".into()));
        }
        let fakes = self.label_counts.get("fake").copied().unwrap_or(0);
        if self.by_codec.values().map(|g| g.count).sum::<usize>() != fakes {
            return Err(EvalError::InvalidInput("codec counts do not sum to the fake count".into()));
        }
        for (k, g) in self.by_codec.iter().chain(&self.by_language) {
            percent(&format!("{k}.acc"), g.acc)?;
            if let Some(e) = g.eer {
                percent(&format!("{k}.eer"), e)?;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serialisable") + "\n"
    }

    /// Parses and checks a report document.
    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self =
            serde_json::from_str(text).map_err(|e| EvalError::InvalidInput(format!("report does not parse: {e}")))?;
        report.check()?;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalsuite::decision_from_score;

    fn record(id: &str, label: Label, codec: Option<&str>, language: &str) -> EmbeddingRecord {
        EmbeddingRecord {
            id: id.into(),
            e_w: vec![],
            e_t: vec![],
            label,
            codec_id: codec.map(String::from),
            language: language.into(),
            split: Split::TestUnseen,
        }
    }

    fn oracle(records: &[EmbeddingRecord]) -> Vec<ScoredPrediction> {
        records
            .iter()
            .map(|r| {
                let score = if r.label == Label::Fake { 0.9 } else { 0.1 };
                ScoredPrediction { id: r.id.clone(), score, decision: decision_from_score(score), truth: r.label }
            })
            .collect()
    }

    fn sample() -> Vec<EmbeddingRecord> {
        vec![
            record("a", Label::Real, None, "l0"),
            record("a~x", Label::Fake, Some("x"), "l0"),
            record("b", Label::Real, None, "l1"),
            record("b~x", Label::Fake, Some("x"), "l1"),
            record("b~y", Label::Fake, Some("y"), "l1"),
        ]
    }

    #[test]
    fn oracle_scores_are_perfect() {
        let recs = sample();
        let r = build_report(Variant::Satyam, Split::TestUnseen, &recs, &oracle(&recs), &BTreeSet::new()).unwrap();
        assert_eq!((r.acc, r.eer), (100.0, 0.0));
        assert_eq!(r.by_codec["x"].count, 2);
        assert_eq!(r.by_codec["y"].eer, Some(0.0));
        assert_eq!(r.by_language["l1"].count, 3);
        assert_eq!(r.codec_novelty, 100.0);
        r.check().unwrap();
    }

    #[test]
    fn novelty_counts_unseen_codecs_only() {
        let recs = sample();
        let seen: BTreeSet<String> = ["x".to_string()].into();
        let r = build_report(Variant::Concat, Split::TestUnseen, &recs, &oracle(&recs), &seen).unwrap();
        assert_eq!(r.codec_novelty, 50.0);
    }

    #[test]
    fn json_round_trip_and_schema() {
        let recs = sample();
        let r = build_report(Variant::Mobius, Split::TestUnseen, &recs, &oracle(&recs), &BTreeSet::new()).unwrap();
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);

        let mut bad: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        bad["report_version"] = 2.into();
        assert!(EvalReport::from_json(&bad.to_string()).is_err());
        let mut bad: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        bad["acc"] = 101.0.into();
        assert!(EvalReport::from_json(&bad.to_string()).is_err());
        let mut bad: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        bad["extra"] = 1.into();
        assert!(EvalReport::from_json(&bad.to_string()).is_err());
    }

    #[test]
    fn misaligned_predictions_rejected() {
        let recs = sample();
        let mut preds = oracle(&recs);
        preds.swap(0, 1);
        assert!(build_report(Variant::Satyam, Split::TestUnseen, &recs, &preds, &BTreeSet::new()).is_err());
        assert!(build_report(Variant::Satyam, Split::TestUnseen, &[], &[], &BTreeSet::new()).is_err());
    }
}
