//! Prompt registry.
//!
//! A prompt id resolves to its text and a fixed embedding in the shared
//! space. Embeddings are seeded from the registry seed and the prompt id,
//! and any of them can be replaced by a 1 × d tensor file produced by a real
//! text encoder.

use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use super::{ModelError, Result};
use crate::dataio;
use crate::seeding;

pub const CONDITIONING_PROMPT_ID: &str = "analyze-artifacts";
pub const DEFAULT_DECISION_PROMPT_ID: &str = "decision-3";
pub const DEFAULT_REGISTRY_SEED: u64 = 0x5EED_0A11;

/// Euclidean norm of seeded prompt embeddings.
pub const PROMPT_NORM: f64 = 0.5;

const BUILTIN: &[(&str, &str)] = &[
    (CONDITIONING_PROMPT_ID, "Analyze the speech for unnatural artifacts"),
    ("decision-1", "Is this speech real or fake? Reply with one word only: \"Real\" or \"Fake\"."),
    ("decision-2", "What is the authenticity of this speech? Answer \"Fake\" or \"Real\"."),
    ("decision-3", "Determine whether the speech is real or fake. Answer only in one word: \"Real\" or \"Fake\""),
    ("decision-4", "Can you determine if this speech is fake or real? Answer \"Fake\" or \"Real\"."),
    ("decision-5", "Is this a real speech recording? Answer \"Fake\" or \"Real\"."),
    ("decision-6", "Is this a AI-generated speech sample? Answer \"Fake\" or \"Real\"."),
];

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSpec {
    pub prompt_id: String,
    pub text: String,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PromptRegistry {
    seed: u64,
    texts: BTreeMap<String, String>,
    overrides: BTreeMap<String, Vec<f64>>,
}

impl Default for PromptRegistry {
    fn default() -> Self {
        Self::new(DEFAULT_REGISTRY_SEED)
    }
}

impl PromptRegistry {
    pub fn new(seed: u64) -> Self {
        let texts = BUILTIN.iter().map(|(id, t)| (id.to_string(), t.to_string())).collect();
        Self { seed, texts, overrides: BTreeMap::new() }
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.texts.keys().map(String::as_str)
    }

    pub fn text(&self, prompt_id: &str) -> Option<&str> {
        self.texts.get(prompt_id).map(String::as_str)
    }

    pub fn register(&mut self, prompt_id: &str, text: &str) {
        self.texts.insert(prompt_id.into(), text.into());
    }

    /// Replaces the seeded embedding of `prompt_id` with row 0 of a tensor file.
    pub fn load_override(&mut self, prompt_id: &str, path: &Path) -> Result<()> {
        let m = dataio::read_tensor_file(path).map_err(|e| ModelError::Config(e.to_string()))?;
        if m.rows() != 1 {
            return Err(ModelError::Config(format!(
                "prompt tensor {} has {} rows, expected 1",
                path.display(),
                m.rows()
            )));
        }
        self.overrides.insert(prompt_id.into(), m.row_f64(0));
        Ok(())
    }

    pub fn resolve(&self, prompt_id: &str, dim: usize) -> Result<PromptSpec> {
        let text = self
            .text(prompt_id)
            .ok_or_else(|| ModelError::Config(format!("unknown prompt id {prompt_id:?}")))?
            .to_owned();
        let embedding = match self.overrides.get(prompt_id) {
            Some(v) if v.len() != dim => {
                return Err(ModelError::Config(format!(
                    "prompt {prompt_id:?} override has dim {}, model expects {dim}",
                    v.len()
                )))
            }
            Some(v) => v.clone(),
            None => self.seeded_embedding(prompt_id, dim),
        };
        Ok(PromptSpec { prompt_id: prompt_id.into(), text, embedding })
    }

    fn seeded_embedding(&self, prompt_id: &str, dim: usize) -> Vec<f64> {
        let mut rng = seeding::rng_for(self.seed, &format!("prompt/{prompt_id}"));
        let raw: Vec<f64> = (0..dim).map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
        let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        raw.into_iter().map(|x| x * PROMPT_NORM / n).collect()
    }
}
