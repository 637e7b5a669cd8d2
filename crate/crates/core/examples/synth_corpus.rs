//! Generates the default synthetic corpus and prints its split counts.
//!
//! ```text
//! cargo run --example synth_corpus -- /tmp/corpus
//! ```

use std::path::PathBuf;

use cfdetect::codecsim::{synth_corpus, SynthConfig};
use cfdetect::dataio;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out =
        std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("cfdetect-corpus"));
    let cfg = SynthConfig::default();
    let manifest = synth_corpus(&cfg, &out)?;
    println!("wrote {} records to {}", manifest.records.len(), out.display());
    for (split, by_label) in dataio::split_counts(&manifest.records) {
        println!("  {split:<11} {by_label:?}");
    }
    let report = dataio::validate_corpus(&out)?;
    println!("validation: {}", if report.is_clean() { "clean".to_string() } else { report.to_string() });
    Ok(())
}
