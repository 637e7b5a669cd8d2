//! Trains one variant on a corpus and reports test metrics per split.
//!
//! ```text
//! cargo run --release --example synth_corpus -- /tmp/corpus
//! cargo run --release --example train_detector -- /tmp/corpus satyam 0
//! ```

use std::path::PathBuf;

use cfdetect::dataio::{Corpus, Split};
use cfdetect::evalsuite::{accuracy, compute_eer};
use cfdetect::model::{ModelConfig, PromptRegistry, Variant};
use cfdetect::trainer::{score_records, train_corpus, with_corpus_dims, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().ok_or("usage: train_detector <corpus> [variant] [seed]")?);
    let variant: Variant = args.next().as_deref().unwrap_or("satyam").parse()?;
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);

    let corpus = Corpus::load(&dir)?;
    let mcfg = with_corpus_dims(&ModelConfig { variant, ..ModelConfig::default() }, &corpus);
    let tcfg = TrainConfig { seed, ..TrainConfig::default() };
    let prompt = PromptRegistry::default().resolve(&mcfg.prompt_id, mcfg.d)?;

    let trained = train_corpus(&corpus, &mcfg, &tcfg, &prompt)?;
    for e in &trained.log.epochs {
        println!(
            "epoch {} loss {:.4} valid acc {:.2} eer {:.2}",
            e.epoch,
            e.mean_total,
            e.valid_acc.unwrap_or(f64::NAN),
            e.valid_eer.unwrap_or(f64::NAN)
        );
    }
    for split in [Split::TestSeen, Split::TestUnseen] {
        let records = corpus.split_records(&[split]);
        let scored = score_records(&records, &trained.params, &mcfg, &prompt)?;
        let eer = compute_eer(&scored.iter().map(|p| (p.score, p.truth)).collect::<Vec<_>>())?;
        println!("{split}: acc {:.2} eer {:.2}", accuracy(&scored)?, eer.eer);
    }
    println!("trained in {:.1}s", trained.log.wall_time_secs);
    Ok(())
}
