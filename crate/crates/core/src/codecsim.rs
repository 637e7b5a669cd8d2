//! Synthetic codec-resynthesis corpora.
//!
//! Real utterances are frame sequences drawn from per-speaker AR(1)
//! Gaussian processes. A codec is a residual vector quantizer: encoding
//! picks, stage by stage, the nearest codeword of the running residual, and
//! decoding sums the selected codewords. A fake is the decoded encoding of a
//! real utterance, so it keeps the real one's coarse content and loses what
//! the codebooks cannot represent.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{self, CorpusManifest, DataError, Label, ManifestRow, Matrix, Split};
use crate::seeding::{self, Rng};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("output directory {0} is not empty")]
    OutputNotEmpty(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, CodecError>;

/// `T × F` frames, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<f64>,
    len: usize,
    dim: usize,
}

impl FrameSequence {
    pub fn new(frames: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || frames.is_empty() || !frames.len().is_multiple_of(dim) {
            return Err(CodecError::InvalidInput(format!("{} values do not form frames of dim {dim}", frames.len())));
        }
        if frames.iter().any(|x| !x.is_finite()) {
            return Err(CodecError::InvalidInput("non-finite frame value".into()));
        }
        Ok(Self { len: frames.len() / dim, frames, dim })
    }

    pub fn from_frames(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(CodecError::InvalidInput("frames have differing dims".into()));
        }
        Self::new(rows.concat(), dim)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.frames.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.frames
    }

    /// Per-dimension mean and (biased) standard deviation over frames.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.len as f64;
        let mut mean = vec![0.0; self.dim];
        for f in self.frames() {
            mean.iter_mut().zip(f).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; self.dim];
        for f in self.frames() {
            var.iter_mut().zip(f).zip(&mean).for_each(|((v, x), m)| *v += (x - m) * (x - m));
        }
        let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
        (mean, std)
    }
}

/// A residual vector quantizer: `stages` codeword matrices of `K × F`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub codec_id: String,
    pub seed: u64,
    stages: Vec<Vec<f64>>,
    codewords: usize,
    dim: usize,
}

impl Codebook {
    pub fn from_stages(codec_id: &str, seed: u64, stages: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let codewords = stages.first().map_or(0, Vec::len);
        let dim = stages.first().and_then(|s| s.first()).map_or(0, Vec::len);
        if stages.is_empty() || codewords == 0 || dim == 0 {
            return Err(CodecError::InvalidInput("codebook needs at least one stage and codeword".into()));
        }
        if stages.iter().any(|s| s.len() != codewords || s.iter().any(|c| c.len() != dim)) {
            return Err(CodecError::InvalidInput("codebook stages must all be K × F".into()));
        }
        Ok(Self {
            codec_id: codec_id.into(),
            seed,
            stages: stages.into_iter().map(|s| s.concat()).collect(),
            codewords,
            dim,
        })
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn codewords(&self) -> usize {
        self.codewords
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn codeword(&self, stage: usize, k: usize) -> &[f64] {
        &self.stages[stage][k * self.dim..(k + 1) * self.dim]
    }

    /// Little-endian dump of the codewords, for determinism checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.stages.iter().flatten().flat_map(|x| x.to_le_bytes()).collect()
    }

    fn nearest(&self, stage: usize, v: &[f64]) -> usize {
        nearest_codeword(&self.stages[stage], self.dim, v)
    }
}

/// Index of the closest row of `codewords` to `v`; ties go to the lower index.
fn nearest_codeword(codewords: &[f64], dim: usize, v: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in codewords.chunks_exact(dim).enumerate() {
        let d: f64 = c.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// `T × S` codeword indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeSequence {
    codes: Vec<u32>,
    len: usize,
    stages: usize,
}

impl CodeSequence {
    pub fn new(codes: Vec<u32>, stages: usize) -> Result<Self> {
        if stages == 0 || codes.is_empty() || !codes.len().is_multiple_of(stages) {
            return Err(CodecError::InvalidInput("codes do not form a T × S matrix".into()));
        }
        Ok(Self { len: codes.len() / stages, codes, stages })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    pub fn frame_codes(&self, t: usize) -> &[u32] {
        &self.codes[t * self.stages..(t + 1) * self.stages]
    }
}

/// Fits a residual quantizer with `iters` rounds of k-means per stage.
///
/// Stage `s` is fit on what stages `0..s` leave unexplained. Centroids start
/// at `codewords` distinct frames drawn with `seed`; a cluster that empties
/// keeps its previous centroid.
pub fn train_codebook(
    frames: &[FrameSequence],
    codec_id: &str,
    stages: usize,
    codewords: usize,
    iters: usize,
    seed: u64,
) -> Result<Codebook> {
    if stages == 0 || codewords == 0 {
        return Err(CodecError::InvalidInput("stages and codewords must be ≥ 1".into()));
    }
    let dim = frames.first().map_or(0, FrameSequence::dim);
    if frames.iter().any(|f| f.dim() != dim) {
        return Err(CodecError::InvalidInput("training sequences have differing frame dims".into()));
    }
    let mut residual: Vec<f64> = frames.iter().flat_map(|f| f.as_slice().iter().copied()).collect();
    let n = residual.len() / dim.max(1);
    if n < codewords {
        return Err(CodecError::InvalidInput(format!("{n} training frames for {codewords} codewords")));
    }

    let mut rng = seeding::rng_for(seed, codec_id);
    let mut fitted = Vec::with_capacity(stages);
    for _ in 0..stages {
        let centroids = kmeans(&residual, dim, codewords, iters, &mut rng)?;
        for v in residual.chunks_exact_mut(dim) {
            let k = nearest_codeword(&centroids, dim, v);
            v.iter_mut().zip(&centroids[k * dim..(k + 1) * dim]).for_each(|(r, c)| *r -= c);
        }
        fitted.push(centroids);
    }
    Ok(Codebook { codec_id: codec_id.into(), seed, stages: fitted, codewords, dim })
}

fn kmeans(points: &[f64], dim: usize, k: usize, iters: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    let n = points.len() / dim;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut picked = HashSet::new();
    let mut centroids = Vec::with_capacity(k * dim);
    for i in order {
        let p = &points[i * dim..(i + 1) * dim];
        let key: Vec<u64> = p.iter().map(|x| x.to_bits()).collect();
        if picked.insert(key) {
            centroids.extend_from_slice(p);
            if picked.len() == k {
                break;
            }
        }
    }
    if picked.len() < k {
        return Err(CodecError::InvalidInput(format!("only {} distinct frames for {k} codewords", picked.len())));
    }

    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for _ in 0..iters {
        sums.iter_mut().for_each(|s| *s = 0.0);
        counts.iter_mut().for_each(|c| *c = 0);
        for p in points.chunks_exact(dim) {
            let j = nearest_codeword(&centroids, dim, p);
            counts[j] += 1;
            sums[j * dim..(j + 1) * dim].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for j in 0..k {
            if counts[j] > 0 {
                let c = counts[j] as f64;
                centroids[j * dim..(j + 1) * dim]
                    .iter_mut()
                    .zip(&sums[j * dim..(j + 1) * dim])
                    .for_each(|(m, s)| *m = s / c);
            }
        }
    }
    Ok(centroids)
}

pub fn encode(x: &FrameSequence, cb: &Codebook) -> Result<CodeSequence> {
    if x.dim() != cb.dim {
        return Err(CodecError::InvalidInput(format!("frame dim {} vs codebook dim {}", x.dim(), cb.dim)));
    }
    let mut codes = Vec::with_capacity(x.len() * cb.stage_count());
    let mut residual = vec![0.0; cb.dim];
    for frame in x.frames() {
        residual.copy_from_slice(frame);
        for s in 0..cb.stage_count() {
            let k = cb.nearest(s, &residual);
            residual.iter_mut().zip(cb.codeword(s, k)).for_each(|(r, c)| *r -= c);
            codes.push(k as u32);
        }
    }
    CodeSequence::new(codes, cb.stage_count())
}

pub fn decode(z: &CodeSequence, cb: &Codebook) -> Result<FrameSequence> {
    if z.stages() != cb.stage_count() {
        return Err(CodecError::InvalidInput(format!(
            "{} code stages vs {} codebook stages",
            z.stages(),
            cb.stage_count()
        )));
    }
    let mut frames = Vec::with_capacity(z.len() * cb.dim);
    for t in 0..z.len() {
        let mut out = vec![0.0; cb.dim];
        for (s, &k) in z.frame_codes(t).iter().enumerate() {
            let k = k as usize;
            if k >= cb.codewords {
                return Err(CodecError::InvalidInput(format!("code {k} out of range at frame {t}, stage {s}")));
            }
            out.iter_mut().zip(cb.codeword(s, k)).for_each(|(o, c)| *o += c);
        }
        frames.extend(out);
    }
    FrameSequence::new(frames, cb.dim)
}

/// Fixed random linear maps standing in for the two frozen speech encoders.
#[derive(Debug, Clone)]
pub struct ViewProjector {
    frame_dim: usize,
    d_w: usize,
    d_t: usize,
    semantic: Vec<f64>,
    paralinguistic: Vec<f64>,
    content_weight: f64,
}

impl ViewProjector {
    pub fn new(seed: u64, frame_dim: usize, d_w: usize, d_t: usize) -> Self {
        let mut rng = seeding::rng_for(seed, "view-projector");
        // variance 1/(fan_in · d_out): embedding norms track the RMS of the frame statistics
        let mut gaussian = |n: usize, fan_in: usize| -> Vec<f64> {
            let scale = (fan_in as f64 * (n / fan_in) as f64).sqrt().recip();
            (0..n).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect()
        };
        let semantic = gaussian(d_w * frame_dim, frame_dim);
        let paralinguistic = gaussian(d_t * 2 * frame_dim, 2 * frame_dim);
        Self { frame_dim, d_w, d_t, semantic, paralinguistic, content_weight: 1.0 }
    }

    /// Scales the frame mean before it enters the paralinguistic view.
    pub fn with_content_weight(mut self, w: f64) -> Self {
        self.content_weight = w;
        self
    }

    /// `e_w` maps the frame mean; `e_t` maps the weighted mean concatenated with the std.
    pub fn embed(&self, x: &FrameSequence) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.dim() != self.frame_dim {
            return Err(CodecError::InvalidInput(format!("frame dim {} vs projector dim {}", x.dim(), self.frame_dim)));
        }
        let (mean, std) = x.moments();
        let stats: Vec<f64> = mean.iter().map(|m| m * self.content_weight).chain(std.iter().copied()).collect();
        Ok((matvec(&self.semantic, self.d_w, &mean), matvec(&self.paralinguistic, self.d_t, &stats)))
    }
}

fn matvec(m: &[f64], rows: usize, v: &[f64]) -> Vec<f64> {
    let cols = v.len();
    (0..rows).map(|r| m[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

pub fn embed_views(x: &FrameSequence, proj_seed: u64, d_w: usize, d_t: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    ViewProjector::new(proj_seed, x.dim(), d_w, d_t).embed(x)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecSpec {
    pub id: String,
    pub stages: usize,
    pub codewords: usize,
    pub seed: u64,
}

impl CodecSpec {
    pub fn new(stages: usize, codewords: usize, seed: u64) -> Self {
        Self { id: format!("rvq_s{stages}_k{codewords}"), stages, codewords, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub languages: Vec<String>,
    pub utterances_per_language: usize,
    /// Inclusive frame-count range per utterance.
    pub frames_min: usize,
    pub frames_max: usize,
    pub frame_dim: usize,
    pub speakers_per_language: usize,
    pub seen_codecs: Vec<CodecSpec>,
    pub unseen_codecs: Vec<CodecSpec>,
    pub d_w: usize,
    pub d_t: usize,
    pub seed: u64,
    /// Fractions of each language's utterances in train, valid, test_seen, test_unseen.
    pub split_fractions: [f64; 4],
    /// Spread of language-level mean offsets.
    pub language_spread: f64,
    /// Spread of speaker-cluster means around their language mean.
    pub speaker_spread: f64,
    /// Per-frame standard deviation of the speaker process.
    pub frame_std: f64,
    /// AR(1) coefficient of the speaker process.
    pub ar_coef: f64,
    pub kmeans_iters: usize,
    /// Cap on frames sampled from the train split to fit each codebook.
    pub codebook_max_frames: usize,
    /// Additive Gaussian noise on test_unseen frames (real and fake); 0 disables it.
    pub unseen_noise_std: f64,
    /// Weight of the frame mean in the paralinguistic view.
    pub paralinguistic_content_weight: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            languages: vec!["lang0".into(), "lang1".into(), "lang2".into()],
            utterances_per_language: 2000,
            frames_min: 40,
            frames_max: 120,
            frame_dim: 24,
            speakers_per_language: 4,
            seen_codecs: vec![CodecSpec::new(2, 64, 11), CodecSpec::new(4, 32, 12)],
            unseen_codecs: vec![CodecSpec::new(3, 16, 13), CodecSpec::new(1, 256, 14)],
            d_w: 64,
            d_t: 128,
            seed: 2024,
            split_fractions: [0.6, 0.1, 0.15, 0.15],
            language_spread: 1.0,
            speaker_spread: 0.5,
            frame_std: 1.0,
            ar_coef: 0.8,
            kmeans_iters: 25,
            codebook_max_frames: 6000,
            unseen_noise_std: 0.0,
            paralinguistic_content_weight: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CodecError::Config(m));
        if self.languages.is_empty() || self.utterances_per_language == 0 || self.speakers_per_language == 0 {
            return err("languages, utterances and speaker clusters must all be ≥ 1".into());
        }
        if self.languages.iter().collect::<HashSet<_>>().len() != self.languages.len() {
            return err("duplicate language names".into());
        }
        if let Some(l) = self.languages.iter().find(|l| l.is_empty() || l.contains(dataio::FAKE_ID_SEPARATOR)) {
            return err(format!("invalid language name {l:?}"));
        }
        if self.frames_min == 0 || self.frames_min > self.frames_max {
            return err(format!("bad frame range [{}, {}]", self.frames_min, self.frames_max));
        }
        if self.frame_dim == 0 || self.d_w == 0 || self.d_t == 0 {
            return err("dims must be ≥ 1".into());
        }
        let all: Vec<&CodecSpec> = self.seen_codecs.iter().chain(&self.unseen_codecs).collect();
        if all.iter().map(|c| &c.id).collect::<HashSet<_>>().len() != all.len() {
            return err("codec ids must be unique and seen/unseen sets disjoint".into());
        }
        if let Some(c) = all.iter().find(|c| c.stages == 0 || c.codewords == 0 || c.id.is_empty()) {
            return err(format!("codec {:?} needs ≥ 1 stage and codeword", c.id));
        }
        let sum: f64 = self.split_fractions.iter().sum();
        if self.split_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (sum - 1.0).abs() > 1e-9 {
            return err(format!("split fractions {:?} must be in [0, 1] and sum to 1", self.split_fractions));
        }
        if !(0.0..1.0).contains(&self.ar_coef) || !(self.frame_std > 0.0) {
            return err("ar_coef must be in [0, 1) and frame_std positive".into());
        }
        if self.language_spread < 0.0
            || self.speaker_spread < 0.0
            || self.unseen_noise_std < 0.0
            || self.paralinguistic_content_weight < 0.0
        {
            return err("spreads and noise must be non-negative".into());
        }
        Ok(())
    }

    /// Split of utterance `index` within its language.
    fn split_of(&self, index: usize) -> Split {
        let n = self.utterances_per_language as f64;
        let mut cumulative = 0.0;
        for (split, frac) in Split::ALL.iter().zip(self.split_fractions) {
            cumulative += frac;
            if (index as f64) < (cumulative * n).round() {
                return *split;
            }
        }
        Split::TestUnseen
    }
}

struct Speaker {
    mean: Vec<f64>,
    std: Vec<f64>,
}

struct Utterance {
    id: String,
    language: String,
    split: Split,
    frames: FrameSequence,
}

fn gaussian_vec(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

fn speakers(cfg: &SynthConfig, language: &str) -> Vec<Speaker> {
    let mut rng = seeding::rng_for(cfg.seed, &format!("language/{language}"));
    let offset = gaussian_vec(&mut rng, cfg.frame_dim, cfg.language_spread);
    (0..cfg.speakers_per_language)
        .map(|_| {
            let jitter = gaussian_vec(&mut rng, cfg.frame_dim, cfg.speaker_spread);
            let mean = offset.iter().zip(&jitter).map(|(a, b)| a + b).collect();
            let std = (0..cfg.frame_dim).map(|_| cfg.frame_std * (0.8 + 0.4 * rng.random::<f64>())).collect();
            Speaker { mean, std }
        })
        .collect()
}

fn ar_sequence(rng: &mut Rng, speaker: &Speaker, len: usize, ar: f64) -> Vec<f64> {
    let dim = speaker.mean.len();
    let innovation = (1.0 - ar * ar).sqrt();
    let mut state: Vec<f64> = gaussian_vec(rng, dim, 1.0);
    let mut out = Vec::with_capacity(len * dim);
    for t in 0..len {
        if t > 0 {
            for s in state.iter_mut() {
                let e: f64 = StandardNormal.sample(rng);
                *s = ar * *s + innovation * e;
            }
        }
        out.extend((0..dim).map(|i| speaker.mean[i] + speaker.std[i] * state[i]));
    }
    out
}

fn add_noise(x: &FrameSequence, std: f64, seed: u64, label: &str) -> Result<FrameSequence> {
    if std == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = seeding::rng_for(seed, label);
    let noisy = x.as_slice().iter().map(|v| v + std * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
    FrameSequence::new(noisy, x.dim())
}

fn generate_utterances(cfg: &SynthConfig) -> Result<Vec<Utterance>> {
    let mut plan = Vec::new();
    for language in &cfg.languages {
        let spk = std::sync::Arc::new(speakers(cfg, language));
        for i in 0..cfg.utterances_per_language {
            plan.push((language.clone(), i, spk.clone()));
        }
    }
    plan.into_par_iter()
        .map(|(language, i, spk)| {
            let id = format!("{language}-u{i:05}");
            let mut rng = seeding::rng_for(cfg.seed, &format!("utterance/{id}"));
            let len = rng.random_range(cfg.frames_min..=cfg.frames_max);
            let speaker = &spk[i % spk.len()];
            let frames = FrameSequence::new(ar_sequence(&mut rng, speaker, len, cfg.ar_coef), cfg.frame_dim)?;
            Ok(Utterance { id, language, split: cfg.split_of(i), frames })
        })
        .collect()
}

fn codebook_training_set(cfg: &SynthConfig, utterances: &[Utterance], spec: &CodecSpec) -> Result<Vec<FrameSequence>> {
    let train: Vec<&[f64]> =
        utterances.iter().filter(|u| u.split == Split::Train).flat_map(|u| u.frames.frames()).collect();
    if train.is_empty() {
        return Err(CodecError::Config("codebooks need at least one train-split utterance".into()));
    }
    let mut idx: Vec<usize> = (0..train.len()).collect();
    if idx.len() > cfg.codebook_max_frames {
        let mut rng = seeding::rng_for(cfg.seed ^ spec.seed, &format!("codebook-frames/{}", spec.id));
        idx.shuffle(&mut rng);
        idx.truncate(cfg.codebook_max_frames);
        idx.sort_unstable();
    }
    let flat: Vec<f64> = idx.iter().flat_map(|&i| train[i].iter().copied()).collect();
    Ok(vec![FrameSequence::new(flat, cfg.frame_dim)?])
}

/// Generates a full corpus into `out_dir`, which must be absent or empty.
/// Output bytes do not depend on the worker count.
pub fn synth_corpus(cfg: &SynthConfig, out_dir: &Path) -> Result<CorpusManifest> {
    seeding::with_pool(|| synth_corpus_inner(cfg, out_dir))
}

fn synth_corpus_inner(cfg: &SynthConfig, out_dir: &Path) -> Result<CorpusManifest> {
    cfg.validate()?;
    if out_dir.exists() {
        let mut entries = fs::read_dir(out_dir).map_err(|e| DataError::Io { path: out_dir.into(), source: e })?;
        if entries.next().is_some() {
            return Err(CodecError::OutputNotEmpty(out_dir.display().to_string()));
        }
    }

    let utterances = generate_utterances(cfg)?;
    let specs: Vec<(&CodecSpec, bool)> =
        cfg.seen_codecs.iter().map(|c| (c, true)).chain(cfg.unseen_codecs.iter().map(|c| (c, false))).collect();
    let codebooks: Vec<(Codebook, bool)> = specs
        .par_iter()
        .map(|(spec, seen)| {
            let set = codebook_training_set(cfg, &utterances, spec)?;
            let cb = train_codebook(&set, &spec.id, spec.stages, spec.codewords, cfg.kmeans_iters, spec.seed)?;
            Ok((cb, *seen))
        })
        .collect::<Result<_>>()?;

    let projector = ViewProjector::new(cfg.seed, cfg.frame_dim, cfg.d_w, cfg.d_t)
        .with_content_weight(cfg.paralinguistic_content_weight);
    // (id, label, codec, language, split, e_w, e_t) per utterance, real first
    type Row = (String, Label, Option<String>, String, Split, Vec<f64>, Vec<f64>);
    let per_utterance: Vec<Vec<Row>> = utterances
        .par_iter()
        .map(|u| {
            let mut rows = Vec::new();
            let noisy = u.split == Split::TestUnseen && cfg.unseen_noise_std > 0.0;
            let real = if noisy {
                add_noise(&u.frames, cfg.unseen_noise_std, cfg.seed, &format!("noise/{}", u.id))?
            } else {
                u.frames.clone()
            };
            let (e_w, e_t) = projector.embed(&real)?;
            rows.push((u.id.clone(), Label::Real, None, u.language.clone(), u.split, e_w, e_t));
            for (cb, seen) in &codebooks {
                let applies = match u.split {
                    Split::Train | Split::Valid | Split::TestSeen => *seen,
                    Split::TestUnseen => !*seen,
                };
                if !applies {
                    continue;
                }
                let mut fake = decode(&encode(&u.frames, cb)?, cb)?;
                let id = dataio::fake_id(&u.id, &cb.codec_id);
                if noisy {
                    fake = add_noise(&fake, cfg.unseen_noise_std, cfg.seed, &format!("noise/{id}"))?;
                }
                let (e_w, e_t) = projector.embed(&fake)?;
                rows.push((id, Label::Fake, Some(cb.codec_id.clone()), u.language.clone(), u.split, e_w, e_t));
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;

    let mut manifest = Vec::new();
    let mut semantic = Vec::new();
    let mut paralinguistic = Vec::new();
    for (id, label, codec_id, language, split, e_w, e_t) in per_utterance.into_iter().flatten() {
        manifest.push(ManifestRow { id, label, codec_id, language, split, row_index: manifest.len() as u64 });
        semantic.push(e_w);
        paralinguistic.push(e_t);
    }
    Ok(dataio::write_corpus(out_dir, &manifest, &Matrix::from_rows(&semantic)?, &Matrix::from_rows(&paralinguistic)?)?)
}
