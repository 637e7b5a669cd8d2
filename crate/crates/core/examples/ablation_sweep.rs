//! Trains every variant over a few seeds and writes the sweep artefacts.
//!
//! ```text
//! cargo run --release --example synth_corpus -- /tmp/corpus
//! cargo run --release --example ablation_sweep -- /tmp/corpus /tmp/ablation
//! ```

use std::path::PathBuf;

use cfdetect::dataio::Corpus;
use cfdetect::evalsuite::{ablation_sweep, SweepConfig};
use cfdetect::model::{ModelConfig, PromptRegistry};
use cfdetect::trainer::{with_corpus_dims, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1).map(PathBuf::from);
    let data = args.next().ok_or("usage: ablation_sweep <corpus> [out]")?;
    let out = args.next().unwrap_or_else(|| std::env::temp_dir().join("cfdetect-ablation"));

    let corpus = Corpus::load(&data)?;
    let mcfg = with_corpus_dims(&ModelConfig::default(), &corpus);
    let prompt = PromptRegistry::default().resolve(&mcfg.prompt_id, mcfg.d)?;
    let sweep = SweepConfig { seeds: vec![0, 1, 2], ..SweepConfig::default() };
    let report = ablation_sweep(&corpus, &mcfg, &TrainConfig::default(), &prompt, &sweep)?;

    for s in &report.summary {
        let eer = s.seen_eer.map(|m| format!("{:.2} ± {:.2}", m.mean, m.std)).unwrap_or_default();
        println!("{:<8} test_seen eer {eer}", s.variant);
    }
    for c in &report.comparisons {
        println!("satyam vs {:<8} b={:<4} c={:<4} p={:.3e}", c.variant, c.result.b, c.result.c, c.result.p_value);
    }
    std::fs::create_dir_all(&out)?;
    report.write(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}
