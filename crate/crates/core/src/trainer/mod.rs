//! Supervised training with Adam and decoupled weight decay.

mod checkpoint;

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::LossBreakdown;
use crate::dataio::{Corpus, DataError, EmbeddingRecord, Split};
use crate::evalsuite::{self, EvalError, ScoredPrediction};
use crate::model::{self, ModelConfig, ModelError, ModelParams, PromptSpec};
use crate::seeding;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, CHECKPOINT_VERSION, PARAMS_FILE,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, step {step}: total loss {total}")]
    Diverged { epoch: usize, step: usize, total: f64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    /// `learning_rate = 0` is accepted so a run can be checked to leave
    /// parameters untouched.
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return err("learning_rate must be finite and non-negative");
        }
        if self.batch_size < 2 {
            return err("batch_size must be ≥ 2");
        }
        if self.epochs == 0 {
            return err("epochs must be ≥ 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return err("eps must be positive and weight_decay non-negative");
        }
        Ok(())
    }

    /// Seed of the parameter initialisation.
    pub fn init_seed(&self) -> u64 {
        seeding::derive(self.seed, "init")
    }
}

/// Adam with decoupled weight decay over a fixed list of parameter slots.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, slot_sizes: &[usize]) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: slot_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: slot_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every slot. `params[i]` and `grads[i]` must match slot `i`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.m.len(), "slot count");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] = p[i] * (1.0 - self.lr * self.weight_decay) - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub batch: usize,
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_total: f64,
    pub valid_acc: Option<f64>,
    pub valid_eer: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    /// Excluded from serialisation so logs of repeated runs compare equal.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogLine<'a> {
    Step(&'a StepLog),
    Epoch(&'a EpochLog),
}

/// Wall time is ignored.
impl PartialEq for TrainLog {
    fn eq(&self, other: &Self) -> bool {
        self.steps == other.steps && self.epochs == other.epochs
    }
}

impl TrainLog {
    /// Step lines, each epoch's summary following its last step.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut epochs = self.epochs.iter().peekable();
        for (i, s) in self.steps.iter().enumerate() {
            out.push_str(&serde_json::to_string(&LogLine::Step(s)).expect("serialisable"));
            out.push('\n');
            let last_of_epoch = self.steps.get(i + 1).is_none_or(|n| n.epoch != s.epoch);
            if last_of_epoch {
                if let Some(e) = epochs.next_if(|e| e.epoch == s.epoch) {
                    out.push_str(&serde_json::to_string(&LogLine::Epoch(e)).expect("serialisable"));
                    out.push('\n');
                }
            }
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> std::result::Result<(), DataError> {
        let io = |e| DataError::Io { path: path.into(), source: e };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(io)
    }

    pub fn epoch_mean(&self, epoch: usize) -> Option<f64> {
        self.epochs.iter().find(|e| e.epoch == epoch).map(|e| e.mean_total)
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub params: ModelParams,
    pub log: TrainLog,
}

/// Scores records with the documented decision rule.
pub fn score_records(
    records: &[EmbeddingRecord],
    params: &ModelParams,
    cfg: &ModelConfig,
    prompt: &PromptSpec,
) -> model::Result<Vec<ScoredPrediction>> {
    let preds = seeding::with_pool(|| model::predict_batch(records, params, cfg, prompt))?;
    Ok(records
        .iter()
        .zip(preds)
        .map(|(r, p)| ScoredPrediction { id: r.id.clone(), score: p.score, decision: p.decision, truth: r.label })
        .collect())
}

fn round_to_f32(params: &mut ModelParams) {
    for (_, t) in params.trainable_mut() {
        t.data.iter_mut().for_each(|x| *x = *x as f32 as f64);
    }
}

/// Trains from a seeded initialisation. `valid` may be empty, in which case
/// epoch logs carry no validation metrics.
pub fn train(
    train_set: &[EmbeddingRecord],
    valid: &[EmbeddingRecord],
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    prompt: &PromptSpec,
) -> Result<Trained> {
    let init = ModelParams::init(mcfg, tcfg.init_seed())?;
    train_from(init, train_set, valid, mcfg, tcfg, prompt)
}

/// Trains starting from `params`.
pub fn train_from(
    mut params: ModelParams,
    train_set: &[EmbeddingRecord],
    valid: &[EmbeddingRecord],
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    prompt: &PromptSpec,
) -> Result<Trained> {
    tcfg.validate()?;
    mcfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    let start = Instant::now();
    let sizes: Vec<usize> = params.trainable().iter().map(|(_, t)| t.len()).collect();
    let mut opt = AdamW::new(tcfg, &sizes);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=tcfg.epochs {
        if tcfg.shuffle {
            order.sort_unstable();
            order.shuffle(&mut seeding::rng_for(tcfg.seed, &format!("shuffle/{epoch}")));
        }
        let mut sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let batch: Vec<EmbeddingRecord> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let (out, grads) = model::forward_backward(&batch, &params, mcfg, prompt)?;
            let step = opt.steps() as usize + 1;
            if !out.losses.total.is_finite() {
                return Err(TrainError::Diverged { epoch, step, total: out.losses.total });
            }
            {
                let g: Vec<&[f64]> = grads.trainable().into_iter().map(|(_, t)| t.data.as_slice()).collect();
                let mut p: Vec<&mut [f64]> =
                    params.trainable_mut().into_iter().map(|(_, t)| t.data.as_mut_slice()).collect();
                opt.step(&mut p, &g);
            }
            round_to_f32(&mut params);
            sum += out.losses.total;
            batches += 1;
            log.steps.push(StepLog { epoch, step, batch: b, losses: out.losses });
        }
        let (valid_acc, valid_eer) = if valid.is_empty() {
            (None, None)
        } else {
            let scored = score_records(valid, &params, mcfg, prompt)?;
            let acc = evalsuite::accuracy(&scored)?;
            let eer = evalsuite::compute_eer(&scored.iter().map(|p| (p.score, p.truth)).collect::<Vec<_>>())
                .map(|e| e.eer)
                .ok();
            (Some(acc), eer)
        };
        log.epochs.push(EpochLog { epoch, mean_total: sum / batches as f64, valid_acc, valid_eer });
    }
    log.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(Trained { params, log })
}

/// Trains on a corpus's train split, validating on its valid split.
pub fn train_corpus(corpus: &Corpus, mcfg: &ModelConfig, tcfg: &TrainConfig, prompt: &PromptSpec) -> Result<Trained> {
    let train_set = corpus.split_records(&[Split::Train]);
    let valid = corpus.split_records(&[Split::Valid]);
    if train_set.is_empty() {
        return Err(TrainError::Config(format!("corpus {} has no train records", corpus.dir.display())));
    }
    let mcfg = with_corpus_dims(mcfg, corpus);
    train(&train_set, &valid, &mcfg, tcfg, prompt)
}

/// Copies the corpus embedding dims into a model config.
pub fn with_corpus_dims(mcfg: &ModelConfig, corpus: &Corpus) -> ModelConfig {
    let (d_w, d_t) = corpus.dims();
    ModelConfig { d_w, d_t, ..mcfg.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Label;
    use crate::model::{PromptRegistry, Variant};
    use rand::Rng;

    fn records(n: usize, cfg: &ModelConfig, seed: u64) -> Vec<EmbeddingRecord> {
        let mut rng = seeding::rng(seed);
        (0..n)
            .map(|i| {
                let fake = i % 3 != 0;
                let shift = if fake { 0.3 } else { -0.3 };
                EmbeddingRecord {
                    id: format!("r{i}"),
                    e_w: (0..cfg.d_w).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    e_t: (0..cfg.d_t).map(|_| rng.random_range(-1.0..1.0) + shift).collect(),
                    label: if fake { Label::Fake } else { Label::Real },
                    codec_id: None,
                    language: "lang0".into(),
                    split: Split::Train,
                }
            })
            .collect()
    }

    fn small() -> ModelConfig {
        ModelConfig { d_w: 8, d_t: 8, d: 6, conv_filters: 3, ..ModelConfig::default() }
    }

    fn prompt(cfg: &ModelConfig) -> PromptSpec {
        PromptRegistry::default().resolve(&cfg.prompt_id, cfg.d).unwrap()
    }

    #[test]
    fn adamw_matches_hand_stepped_reference() {
        // f(p) = (p - 3)², gradient 2(p - 3)
        let cfg = TrainConfig { learning_rate: 0.1, weight_decay: 0.05, ..TrainConfig::default() };
        let mut opt = AdamW::new(&cfg, &[1]);
        let mut p = [0.5f64];
        let (mut m, mut v, mut q) = (0.0f64, 0.0f64, 0.5f64);
        for t in 1..=50 {
            let g = 2.0 * (p[0] - 3.0);
            opt.step(&mut [&mut p[..]], &[&[g][..]]);

            let gq = 2.0 * (q - 3.0);
            m = 0.9 * m + 0.1 * gq;
            v = 0.999 * v + 0.001 * gq * gq;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            q = q - 0.1 * 0.05 * q - 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((p[0] - q).abs() < 1e-10, "step {t}: {} vs {q}", p[0]);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let cfg = small();
        let tcfg = TrainConfig { learning_rate: 0.0, epochs: 2, ..TrainConfig::default() };
        let data = records(40, &cfg, 1);
        let init = ModelParams::init(&cfg, tcfg.init_seed()).unwrap();
        let out = train(&data, &[], &cfg, &tcfg, &prompt(&cfg)).unwrap();
        assert_eq!(out.params.to_bytes(), init.to_bytes());
    }

    #[test]
    fn step_count_keeps_partial_batches() {
        let cfg = small();
        let out = train(
            &records(64, &cfg, 2),
            &[],
            &cfg,
            &TrainConfig { epochs: 1, ..TrainConfig::default() },
            &prompt(&cfg),
        )
        .unwrap();
        assert_eq!(out.log.steps.len(), 2);
        let out = train(
            &records(65, &cfg, 2),
            &[],
            &cfg,
            &TrainConfig { epochs: 3, ..TrainConfig::default() },
            &prompt(&cfg),
        )
        .unwrap();
        assert_eq!(out.log.steps.len(), 9);
    }

    #[test]
    fn runs_are_deterministic_and_decoder_is_frozen() {
        let cfg = small();
        let tcfg = TrainConfig { learning_rate: 1e-2, epochs: 2, seed: 5, ..TrainConfig::default() };
        let data = records(70, &cfg, 3);
        let valid = records(12, &cfg, 4);
        let a = train(&data, &valid, &cfg, &tcfg, &prompt(&cfg)).unwrap();
        let b = train(&data, &valid, &cfg, &tcfg, &prompt(&cfg)).unwrap();
        assert_eq!(a.params.to_bytes(), b.params.to_bytes());
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.to_jsonl(), b.log.to_jsonl());
        let init = ModelParams::init(&cfg, tcfg.init_seed()).unwrap();
        assert_eq!(a.params.frozen_bytes(), init.frozen_bytes());
        assert_ne!(a.params.to_bytes(), init.to_bytes());
    }

    #[test]
    fn jsonl_interleaves_epoch_summaries() {
        let cfg = ModelConfig { variant: Variant::Mobius, ..small() };
        let out = train(
            &records(40, &cfg, 6),
            &records(9, &cfg, 7),
            &cfg,
            &TrainConfig { epochs: 2, ..Default::default() },
            &prompt(&cfg),
        )
        .unwrap();
        let kinds: Vec<String> = out
            .log
            .to_jsonl()
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["kind"].as_str().unwrap().to_owned())
            .collect();
        assert_eq!(kinds, ["step", "step", "epoch", "step", "step", "epoch"]);
    }

    #[test]
    fn bad_configs_rejected() {
        assert!(TrainConfig { batch_size: 1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..Default::default() }.validate().is_err());
    }
}
