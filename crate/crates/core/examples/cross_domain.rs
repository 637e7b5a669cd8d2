//! Trains on one synthetic corpus and evaluates on corpora that share the
//! embedding front end but differ in codec family, languages, or both.

use cfdetect::codecsim::{synth_corpus, CodecSpec, SynthConfig};
use cfdetect::dataio::{Corpus, Split};
use cfdetect::evalsuite::{cross_domain, TransferConfig};
use cfdetect::model::{ModelConfig, PromptRegistry};
use cfdetect::trainer::{with_corpus_dims, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tmp = std::env::temp_dir().join(format!("cfdetect-transfer-{}", std::process::id()));
    let base = SynthConfig::default();
    let other_codecs = vec![CodecSpec::new(3, 32, 21), CodecSpec::new(2, 128, 22)];
    let other_languages: Vec<String> = vec!["xa".into(), "xb".into()];
    let targets = [
        ("same", base.clone()),
        ("new codecs", SynthConfig { seen_codecs: other_codecs.clone(), ..base.clone() }),
        ("new languages", SynthConfig { languages: other_languages.clone(), ..base.clone() }),
        ("both", SynthConfig { languages: other_languages, seen_codecs: other_codecs, ..base.clone() }),
    ];

    synth_corpus(&base, &tmp.join("source"))?;
    let source = Corpus::load(&tmp.join("source"))?;
    let mcfg = with_corpus_dims(&ModelConfig::default(), &source);
    let prompt = PromptRegistry::default().resolve(&mcfg.prompt_id, mcfg.d)?;
    let transfer = TransferConfig { test_split: Split::TestSeen, ..TransferConfig::default() };

    for (i, (name, cfg)) in targets.iter().enumerate() {
        let dir = tmp.join(format!("target{i}"));
        synth_corpus(cfg, &dir)?;
        let target = Corpus::load(&dir)?;
        let (report, _) = cross_domain(&source, &target, &mcfg, &TrainConfig::default(), &prompt, &transfer)?;
        println!(
            "{name:<14} acc {:6.2}  eer {:6.2}  codec novelty {:3.0}%",
            report.acc, report.eer, report.codec_novelty
        );
    }
    std::fs::remove_dir_all(&tmp)?;
    Ok(())
}
