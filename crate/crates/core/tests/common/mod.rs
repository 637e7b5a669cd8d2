#![allow(dead_code)]

pub mod grad;

use std::path::Path;

use cfdetect::codecsim::{synth_corpus, SynthConfig};
use cfdetect::model::ModelConfig;
use cfdetect::trainer::TrainConfig;

/// A corpus small enough to train in well under a second.
pub fn tiny_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        utterances_per_language: 16,
        frames_min: 30,
        frames_max: 50,
        d_w: 8,
        d_t: 12,
        kmeans_iters: 5,
        seed,
        ..SynthConfig::default()
    }
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig { d: 6, conv_filters: 3, ..ModelConfig::default() }
}

pub fn tiny_train(seed: u64) -> TrainConfig {
    TrainConfig { epochs: 2, seed, ..TrainConfig::default() }
}

pub fn write_tiny_corpus(dir: &Path, seed: u64) {
    synth_corpus(&tiny_synth(seed), dir).unwrap();
}

/// `--set` arguments reproducing the tiny configs on the command line.
pub fn tiny_overrides() -> Vec<String> {
    [
        "synth.utterances_per_language=16",
        "synth.frames_min=30",
        "synth.frames_max=50",
        "synth.d_w=8",
        "synth.d_t=12",
        "synth.kmeans_iters=5",
        "model.d=6",
        "model.conv_filters=3",
        "train.epochs=2",
    ]
    .iter()
    .flat_map(|s| ["--set".to_string(), s.to_string()])
    .collect()
}
