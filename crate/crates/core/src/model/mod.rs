//! The dual-stage fusion detector and its ablation variants.
//!
//! Two frozen-encoder views of an utterance each pass through a small
//! branch (1-D convolution, global max pool, affine projection, sigmoid
//! gate). The full model lifts both onto the Poincaré ball, aligns their
//! batch distributions, fuses them by Möbius addition, then aligns and fuses
//! the result with a prompt embedding. The fused point is mapped back to the
//! tangent space, projected to a prefix vector, and read out by a frozen
//! two-token decoder.

mod network;
pub mod prompt;

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{AlignmentError, LossWeights, DEFAULT_VAR_FLOOR};
use crate::geometry::{BallConfig, GeometryError};
use crate::seeding;

pub use network::{
    backward, encode_branch, forward, forward_backward, predict, predict_batch, Branch, BranchTrace, ForwardOutput,
    Prediction, RecordTrace,
};
pub use prompt::{PromptRegistry, PromptSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Decision-token order of the frozen decoder.
pub const FAKE_CLASS: usize = 0;
pub const REAL_CLASS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "satyam")]
    Satyam,
    #[serde(rename = "h-bd-ss")]
    HbdSpeech,
    #[serde(rename = "h-bd-st")]
    HbdPrompt,
    #[serde(rename = "e-bd")]
    EuclideanBd,
    #[serde(rename = "ma")]
    Mobius,
    #[serde(rename = "concat")]
    Concat,
    #[serde(rename = "w-only")]
    SemanticOnly,
    #[serde(rename = "t-only")]
    ParalinguisticOnly,
}

/// How representations are combined at both fusion stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    Mobius,
    Sum,
    Concat,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Satyam,
        Variant::HbdSpeech,
        Variant::HbdPrompt,
        Variant::EuclideanBd,
        Variant::Mobius,
        Variant::Concat,
        Variant::SemanticOnly,
        Variant::ParalinguisticOnly,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Satyam => "satyam",
            Variant::HbdSpeech => "h-bd-ss",
            Variant::HbdPrompt => "h-bd-st",
            Variant::EuclideanBd => "e-bd",
            Variant::Mobius => "ma",
            Variant::Concat => "concat",
            Variant::SemanticOnly => "w-only",
            Variant::ParalinguisticOnly => "t-only",
        }
    }

    pub fn uses_semantic(&self) -> bool {
        *self != Variant::ParalinguisticOnly
    }

    pub fn uses_paralinguistic(&self) -> bool {
        *self != Variant::SemanticOnly
    }

    pub fn fusion(&self) -> Fusion {
        match self {
            Variant::EuclideanBd => Fusion::Sum,
            Variant::Concat => Fusion::Concat,
            _ => Fusion::Mobius,
        }
    }

    /// Whether the speech-speech alignment loss is active.
    pub fn aligns_speech(&self) -> bool {
        matches!(self, Variant::Satyam | Variant::HbdSpeech | Variant::EuclideanBd)
    }

    /// Whether the speech-prompt alignment loss is active.
    pub fn aligns_prompt(&self) -> bool {
        matches!(self, Variant::Satyam | Variant::HbdPrompt | Variant::EuclideanBd)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Input dims of the semantic and paralinguistic views.
    pub d_w: usize,
    pub d_t: usize,
    /// Shared representation dim.
    pub d: usize,
    pub conv_filters: usize,
    pub c: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub prompt_id: String,
    pub decoder_seed: u64,
    /// Frozen decoder weights are uniform in `±decoder_scale`.
    pub decoder_scale: f64,
    pub var_floor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            variant: Variant::Satyam,
            d_w: 64,
            d_t: 128,
            d: 128,
            conv_filters: 32,
            c: 1.0,
            lambda1: w.speech,
            lambda2: w.prompt,
            lambda3: w.lm,
            prompt_id: prompt::CONDITIONING_PROMPT_ID.into(),
            decoder_seed: 7,
            decoder_scale: 1.0,
            var_floor: DEFAULT_VAR_FLOOR,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(ModelError::Config(format!("d must be ≥ 2, got {}", self.d)));
        }
        if self.conv_filters == 0 || self.d_w == 0 || self.d_t == 0 {
            return Err(ModelError::Config("conv_filters, d_w and d_t must be ≥ 1".into()));
        }
        if [self.lambda1, self.lambda2, self.lambda3].iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(ModelError::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.decoder_scale.is_finite() && self.decoder_scale > 0.0) {
            return Err(ModelError::Config("decoder_scale must be positive".into()));
        }
        if !(self.var_floor > 0.0) {
            return Err(ModelError::Config("var_floor must be positive".into()));
        }
        self.ball()?;
        Ok(())
    }

    pub fn ball(&self) -> Result<BallConfig> {
        Ok(BallConfig::new(self.c)?)
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { speech: self.lambda1, prompt: self.lambda2, lm: self.lambda3 }
    }
}

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_data(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(ModelError::InvalidInput(format!("shape {shape:?} does not hold {} values", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Uniform in `[-bound, bound]`, rounded to `f32` so checkpoints are lossless.
    fn uniform(shape: &[usize], bound: f64, seed: u64, name: &str) -> Self {
        let mut rng = seeding::rng_for(seed, name);
        let n = shape.iter().product();
        let data = (0..n).map(|_| ((rng.random::<f64>() * 2.0 - 1.0) * bound) as f32 as f64).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|x| x.to_le_bytes()).collect()
    }
}

/// Convolution, projection and gate of one input view.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    /// `filters × 3`.
    pub conv_weight: Tensor,
    pub conv_bias: Tensor,
    /// `d × filters`.
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
    /// `d × d`.
    pub gate_weight: Tensor,
    pub gate_bias: Tensor,
}

pub const CONV_WIDTH: usize = 3;

impl BranchParams {
    const NAMES: [&'static str; 6] =
        ["conv_weight", "conv_bias", "proj_weight", "proj_bias", "gate_weight", "gate_bias"];

    fn init(prefix: &str, filters: usize, d: usize, seed: u64) -> Self {
        let t = |name: &str, shape: &[usize], fan_in: usize| {
            Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), seed, &format!("{prefix}.{name}"))
        };
        Self {
            conv_weight: t("conv_weight", &[filters, CONV_WIDTH], CONV_WIDTH),
            conv_bias: t("conv_bias", &[filters], CONV_WIDTH),
            proj_weight: t("proj_weight", &[d, filters], filters),
            proj_bias: t("proj_bias", &[d], filters),
            gate_weight: t("gate_weight", &[d, d], d),
            gate_bias: t("gate_bias", &[d], d),
        }
    }

    fn zeros_like(&self) -> Self {
        let z = |t: &Tensor| Tensor::zeros(&t.shape);
        Self {
            conv_weight: z(&self.conv_weight),
            conv_bias: z(&self.conv_bias),
            proj_weight: z(&self.proj_weight),
            proj_bias: z(&self.proj_bias),
            gate_weight: z(&self.gate_weight),
            gate_bias: z(&self.gate_bias),
        }
    }

    fn tensors(&self) -> [&Tensor; 6] {
        [&self.conv_weight, &self.conv_bias, &self.proj_weight, &self.proj_bias, &self.gate_weight, &self.gate_bias]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.conv_weight,
            &mut self.conv_bias,
            &mut self.proj_weight,
            &mut self.proj_bias,
            &mut self.gate_weight,
            &mut self.gate_bias,
        ]
    }
}

/// Projections used only by the concatenation variant.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatParams {
    /// `d × 2d`, applied to `[ẽ_w; ẽ_t]`.
    pub speech: Tensor,
    /// `d × 2d`, applied to `[z_f; e_A]`.
    pub prompt: Tensor,
}

/// Frozen two-token readout standing in for the language-model decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenDecoder {
    /// `2 × d`, rows ordered (Fake, Real).
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub semantic: Option<BranchParams>,
    pub paralinguistic: Option<BranchParams>,
    pub concat: Option<ConcatParams>,
    /// `d × d` prefix projection `W_g`.
    pub prefix: Tensor,
    pub decoder: FrozenDecoder,
}

/// Gradients share the parameter layout; the decoder slot stays zero.
pub type ParamGrads = ModelParams;

pub const DECODER_WEIGHT: &str = "decoder.weight";
pub const DECODER_BIAS: &str = "decoder.bias";

impl ModelParams {
    /// Seeded initialisation. The trainable tensors depend only on `seed`
    /// and the frozen decoder only on `cfg.decoder_seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let f = cfg.conv_filters;
        let semantic = cfg.variant.uses_semantic().then(|| BranchParams::init("w", f, d, seed));
        let paralinguistic = cfg.variant.uses_paralinguistic().then(|| BranchParams::init("t", f, d, seed));
        let concat = (cfg.variant.fusion() == Fusion::Concat).then(|| ConcatParams {
            speech: Tensor::uniform(&[d, 2 * d], 1.0 / ((2 * d) as f64).sqrt(), seed, "concat.speech"),
            prompt: Tensor::uniform(&[d, 2 * d], 1.0 / ((2 * d) as f64).sqrt(), seed, "concat.prompt"),
        });
        let bound = 1.0 / (d as f64).sqrt();
        Ok(Self {
            semantic,
            paralinguistic,
            concat,
            prefix: Tensor::uniform(&[d, d], bound, seed, "prefix"),
            decoder: FrozenDecoder {
                weight: Tensor::uniform(&[2, d], cfg.decoder_scale, cfg.decoder_seed, DECODER_WEIGHT),
                bias: Tensor::uniform(&[2], bound, cfg.decoder_seed, DECODER_BIAS),
            },
        })
    }

    pub fn zeros_like(&self) -> ParamGrads {
        Self {
            semantic: self.semantic.as_ref().map(BranchParams::zeros_like),
            paralinguistic: self.paralinguistic.as_ref().map(BranchParams::zeros_like),
            concat: self.concat.as_ref().map(|c| ConcatParams {
                speech: Tensor::zeros(&c.speech.shape),
                prompt: Tensor::zeros(&c.prompt.shape),
            }),
            prefix: Tensor::zeros(&self.prefix.shape),
            decoder: FrozenDecoder {
                weight: Tensor::zeros(&self.decoder.weight.shape),
                bias: Tensor::zeros(&self.decoder.bias.shape),
            },
        }
    }

    /// Trainable tensors in a fixed order, with their checkpoint names.
    pub fn trainable(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, branch) in [("w", &self.semantic), ("t", &self.paralinguistic)] {
            if let Some(b) = branch {
                for (name, t) in BranchParams::NAMES.iter().zip(b.tensors()) {
                    out.push((format!("{prefix}.{name}"), t));
                }
            }
        }
        if let Some(c) = &self.concat {
            out.push(("concat.speech".into(), &c.speech));
            out.push(("concat.prompt".into(), &c.prompt));
        }
        out.push(("prefix".into(), &self.prefix));
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut all = self.named_tensors_mut();
        all.truncate(all.len() - 2);
        all
    }

    pub fn frozen(&self) -> Vec<(String, &Tensor)> {
        vec![(DECODER_WEIGHT.into(), &self.decoder.weight), (DECODER_BIAS.into(), &self.decoder.bias)]
    }

    /// Every tensor, trainable then frozen.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut all = self.trainable();
        all.extend(self.frozen());
        all
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn frozen_bytes(&self) -> Vec<u8> {
        self.frozen().iter().flat_map(|(_, t)| t.to_bytes()).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.named_tensors().iter().flat_map(|(_, t)| t.to_bytes()).collect()
    }

    /// Tensor names a params set for `cfg` must contain, trainable then frozen.
    pub fn expected_names(cfg: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
        let template = Self::init(cfg, 0)?;
        Ok(template.named_tensors().into_iter().map(|(n, t)| (n, t.shape.clone())).collect())
    }

    /// Rebuilds params for `cfg` from named tensors, checking names and shapes.
    pub fn from_named(cfg: &ModelConfig, mut tensors: std::collections::BTreeMap<String, Tensor>) -> Result<Self> {
        let mut out = Self::init(cfg, 0)?;
        for (name, slot) in out.named_tensors_mut() {
            let t = tensors.remove(&name).ok_or_else(|| {
                ModelError::Config(format!("missing tensor {name} required by variant {}", cfg.variant))
            })?;
            if t.shape != slot.shape {
                return Err(ModelError::Config(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape, slot.shape
                )));
            }
            *slot = t;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(ModelError::Config(format!("unexpected tensor {extra} for variant {}", cfg.variant)));
        }
        Ok(out)
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let Self { semantic, paralinguistic, concat, prefix, decoder } = self;
        let mut out = Vec::new();
        for (tag, branch) in [("w", semantic), ("t", paralinguistic)] {
            if let Some(b) = branch {
                for (name, t) in BranchParams::NAMES.iter().zip(b.tensors_mut()) {
                    out.push((format!("{tag}.{name}"), t));
                }
            }
        }
        if let Some(c) = concat {
            out.push(("concat.speech".into(), &mut c.speech));
            out.push(("concat.prompt".into(), &mut c.prompt));
        }
        out.push(("prefix".into(), prefix));
        out.push((DECODER_WEIGHT.into(), &mut decoder.weight));
        out.push((DECODER_BIAS.into(), &mut decoder.bias));
        out
    }
}
