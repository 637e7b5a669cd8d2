//! Command-line front end.
//!
//! Every subcommand reads one optional TOML config (sections `synth`,
//! `model`, `train`, `sweep`, `transfer`), applies `--set section.key=value`
//! overrides, and writes a `run_manifest.json` next to its outputs holding
//! the resolved config, the tool version and digests of every input file.
//!
//! Exit codes: 0 on success, 1 for usage, config or validation errors, 2 for
//! runtime failures.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codecsim::{synth_corpus, CodecError, SynthConfig};
use crate::dataio::{self, Corpus, DataError, Split};
use crate::evalsuite::{self, EvalError, EvalReport, ScoredPrediction, SweepConfig, TransferConfig};
use crate::model::{ModelConfig, ModelError, PromptRegistry, Variant};
use crate::trainer::{self, TrainConfig, TrainError};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("validation failed: {0}")]
    Invalid(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 2,
            _ => 1,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Config(e.to_string()),
            ModelError::InvalidInput(_) => CliError::Invalid(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<CodecError> for CliError {
    fn from(e: CodecError) -> Self {
        match e {
            CodecError::Data(d) => d.into(),
            CodecError::Config(_) | CodecError::OutputNotEmpty(_) => CliError::Config(e.to_string()),
            CodecError::InvalidInput(_) => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Checkpoint(_) => CliError::Invalid(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Data(d) => d.into(),
            TrainError::Eval(v) => v.into(),
            TrainError::Diverged { .. } => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::InvalidInput(_) => CliError::Invalid(e.to_string()),
            EvalError::Model(m) => m.into(),
            EvalError::Data(d) => d.into(),
            EvalError::Train(t) => (*t).into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "cfdetect", version, about = "Codec-resynthesis fake speech detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML config with optional synth, model, train, sweep and transfer tables.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set model.c=0.5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic codec-resynthesis corpus.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory; must be absent or empty.
        #[arg(long)]
        out: PathBuf,
        /// Master seed (overrides synth.seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a corpus directory against every layout invariant.
    Validate {
        /// Corpus directory.
        dir: PathBuf,
    },
    /// Train one variant on a corpus's train split.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corpus directory.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides model.variant.
        #[arg(long)]
        variant: Option<Variant>,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score one split with a checkpoint and write a report.
    Eval {
        /// Checkpoint directory.
        #[arg(long)]
        ckpt: PathBuf,
        /// Corpus directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test_seen")]
        split: Split,
        /// Report JSON path.
        #[arg(long)]
        report: PathBuf,
        /// Also write per-record predictions as JSONL.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Train on one corpus and evaluate on another.
    Transfer {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corpus to train on.
        #[arg(long)]
        train_data: PathBuf,
        /// Corpus to evaluate on.
        #[arg(long)]
        test_data: PathBuf,
        /// Output directory for the report and predictions.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides transfer.test_split.
        #[arg(long)]
        split: Option<Split>,
    },
    /// Train and evaluate a set of variants under several seeds.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corpus directory.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for sweep.json, runs.csv and eer.svg.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated variants (overrides sweep.variants).
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<Variant>>,
        /// Comma-separated seeds (overrides sweep.seeds).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Concurrent runs (overrides sweep.jobs).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Paired McNemar test between two prediction files.
    Mcnemar {
        /// Predictions JSONL of the first system.
        #[arg(long)]
        a: PathBuf,
        /// Predictions JSONL of the second system.
        #[arg(long)]
        b: PathBuf,
        /// Result JSON path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Every tunable section, as resolved after file and overrides.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub transfer: TransferConfig,
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `key` (dotted) in `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not KEY=VALUE")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key {key:?} is malformed")));
    }
    let (last, path) = parts.split_last().expect("non-empty");
    let mut cur = table;
    for p in path {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        cur = entry.as_table_mut().ok_or_else(|| CliError::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    pub fn resolve(args: &ConfigArgs) -> Result<Self> {
        let mut table = match &args.config {
            Some(path) => {
                let text =
                    fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        for o in &args.overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.synth.validate()?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    /// Subcommand arguments other than the config.
    pub args: BTreeMap<String, String>,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub threads: usize,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Digests `path`, or every regular file directly inside it, in name order.
fn digests(path: &Path, skip: &[&str]) -> Result<Vec<InputDigest>> {
    let mut files = Vec::new();
    if path.is_dir() {
        let listing = fs::read_dir(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        for entry in listing {
            let p = entry.map_err(|e| CliError::Runtime(e.to_string()))?.path();
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if p.is_file() && !skip.contains(&name) {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }
    files.iter().map(|f| Ok(InputDigest { path: f.display().to_string(), sha256: sha256_file(f)? })).collect()
}

struct Manifest {
    subcommand: &'static str,
    args: BTreeMap<String, String>,
    config: serde_json::Value,
    inputs: Vec<InputDigest>,
}

impl Manifest {
    fn new(subcommand: &'static str, config: impl Serialize) -> Self {
        Self {
            subcommand,
            args: BTreeMap::new(),
            config: serde_json::to_value(config).expect("serialisable"),
            inputs: Vec::new(),
        }
    }

    fn arg(mut self, key: &str, value: impl ToString) -> Self {
        self.args.insert(key.to_string(), value.to_string());
        self
    }

    fn input(mut self, path: &Path) -> Result<Self> {
        self.inputs.extend(digests(path, &[RUN_MANIFEST_FILE, TRAIN_LOG_FILE])?);
        Ok(self)
    }

    fn write(self, path: &Path) -> Result<()> {
        let m = RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: self.subcommand.to_string(),
            args: self.args,
            config: self.config,
            inputs: self.inputs,
            threads: crate::seeding::thread_count(),
        };
        write_file(path, &(serde_json::to_string_pretty(&m).expect("serialisable") + "\n"))
    }
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Runtime(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, body).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Manifest path for a single-file output: `<stem>.run_manifest.json` beside it.
fn manifest_beside(file: &Path) -> PathBuf {
    let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    file.with_file_name(format!("{stem}.{RUN_MANIFEST_FILE}"))
}

fn predictions_jsonl(preds: &[ScoredPrediction]) -> String {
    preds.iter().map(|p| serde_json::to_string(p).expect("serialisable") + "\n").collect()
}

pub fn read_predictions(path: &Path) -> Result<Vec<ScoredPrediction>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Invalid(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn prompt_for(model: &ModelConfig) -> Result<crate::model::PromptSpec> {
    Ok(PromptRegistry::default().resolve(&model.prompt_id, model.d)?)
}

fn run_command(cmd: Command, out: &mut dyn std::io::Write) -> Result<()> {
    let say =
        |out: &mut dyn std::io::Write, s: String| writeln!(out, "{s}").map_err(|e| CliError::Runtime(e.to_string()));
    match cmd {
        Command::Synth { config, out: dir, seed } => {
            let mut cfg = RunConfig::resolve(&config)?;
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            let manifest = synth_corpus(&cfg.synth, &dir)?;
            Manifest::new("synth", &cfg.synth).write(&dir.join(RUN_MANIFEST_FILE))?;
            say(out, format!("wrote {} records to {}", manifest.records.len(), dir.display()))?;
            for (split, counts) in dataio::split_counts(&manifest.records) {
                say(out, format!("{split}: {counts:?}"))?;
            }
        }
        Command::Validate { dir } => {
            let report = dataio::validate_corpus(&dir)?;
            if !report.is_clean() {
                return Err(CliError::Invalid(report.to_string()));
            }
            say(out, format!("{}: {} records, clean", dir.display(), report.records))?;
        }
        Command::Train { config, data, out: ck, variant, seed } => {
            let mut cfg = RunConfig::resolve(&config)?;
            if let Some(v) = variant {
                cfg.model.variant = v;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let corpus = Corpus::load(&data)?;
            let model = trainer::with_corpus_dims(&cfg.model, &corpus);
            let trained = trainer::train_corpus(&corpus, &model, &cfg.train, &prompt_for(&model)?)?;
            trainer::save_checkpoint(&ck, &trained.params, &model, Some(&cfg.train))?;
            trained.log.write_jsonl(&ck.join(TRAIN_LOG_FILE))?;
            Manifest::new("train", serde_json::json!({ "model": model, "train": cfg.train }))
                .arg("data", data.display())
                .input(&data)?
                .write(&ck.join(RUN_MANIFEST_FILE))?;
            for e in &trained.log.epochs {
                say(
                    out,
                    format!(
                        "epoch {} mean loss {:.4} valid acc {:?} eer {:?}",
                        e.epoch, e.mean_total, e.valid_acc, e.valid_eer
                    ),
                )?;
            }
        }
        Command::Eval { ckpt, data, split, report, predictions } => {
            let ck = trainer::load_checkpoint(&ckpt)?;
            let corpus = Corpus::load(&data)?;
            let (rep, preds) = evalsuite::evaluate(&ck.params, &ck.model, &prompt_for(&ck.model)?, &corpus, split)?;
            write_file(&report, &rep.to_json())?;
            if let Some(p) = &predictions {
                write_file(p, &predictions_jsonl(&preds))?;
            }
            Manifest::new("eval", &ck.model)
                .arg("ckpt", ckpt.display())
                .arg("data", data.display())
                .arg("split", split)
                .input(&ckpt)?
                .input(&data)?
                .write(&manifest_beside(&report))?;
            say(out, format!("{split}: acc {:.2} eer {:.2} (threshold {:.4})", rep.acc, rep.eer, rep.eer_threshold))?;
        }
        Command::Transfer { config, train_data, test_data, out: dir, variant, seed, split } => {
            let mut cfg = RunConfig::resolve(&config)?;
            if let Some(v) = variant {
                cfg.model.variant = v;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(s) = split {
                cfg.transfer.test_split = s;
            }
            let source = Corpus::load(&train_data)?;
            let target = Corpus::load(&test_data)?;
            let model = trainer::with_corpus_dims(&cfg.model, &source);
            let (rep, preds) =
                evalsuite::cross_domain(&source, &target, &model, &cfg.train, &prompt_for(&model)?, &cfg.transfer)?;
            write_file(&dir.join("report.json"), &rep.to_json())?;
            write_file(&dir.join("predictions.jsonl"), &predictions_jsonl(&preds))?;
            Manifest::new(
                "transfer",
                serde_json::json!({ "model": model, "train": cfg.train, "transfer": cfg.transfer }),
            )
            .arg("train_data", train_data.display())
            .arg("test_data", test_data.display())
            .input(&train_data)?
            .input(&test_data)?
            .write(&dir.join(RUN_MANIFEST_FILE))?;
            say(
                out,
                format!(
                    "transfer {}: acc {:.2} eer {:.2} codec novelty {:.1}%",
                    rep.split, rep.acc, rep.eer, rep.codec_novelty
                ),
            )?;
        }
        Command::Ablate { config, data, out: dir, variants, seeds, jobs } => {
            let mut cfg = RunConfig::resolve(&config)?;
            if let Some(v) = variants {
                cfg.sweep.variants = v;
            }
            if let Some(s) = seeds {
                cfg.sweep.seeds = s;
            }
            if let Some(j) = jobs {
                cfg.sweep.jobs = j;
            }
            let corpus = Corpus::load(&data)?;
            let model = trainer::with_corpus_dims(&cfg.model, &corpus);
            let sweep = evalsuite::ablation_sweep(&corpus, &model, &cfg.train, &prompt_for(&model)?, &cfg.sweep)?;
            sweep.write(&dir)?;
            Manifest::new("ablate", serde_json::json!({ "model": model, "train": cfg.train, "sweep": cfg.sweep }))
                .arg("data", data.display())
                .input(&data)?
                .write(&dir.join(RUN_MANIFEST_FILE))?;
            for s in &sweep.summary {
                let f = |m: Option<evalsuite::MeanStd>| {
                    m.map(|m| format!("{:.2}±{:.2}", m.mean, m.std)).unwrap_or("-".into())
                };
                say(
                    out,
                    format!(
                        "{:<8} seen acc {} eer {} | unseen eer {}",
                        s.variant.as_str(),
                        f(s.seen_acc),
                        f(s.seen_eer),
                        f(s.unseen_eer)
                    ),
                )?;
            }
            for c in &sweep.comparisons {
                say(
                    out,
                    format!("satyam vs {}: b={} c={} p={:.3e}", c.variant, c.result.b, c.result.c, c.result.p_value),
                )?;
            }
        }
        Command::Mcnemar { a, b, out: dest } => {
            let result = evalsuite::mcnemar(&read_predictions(&a)?, &read_predictions(&b)?)?;
            let json = serde_json::to_string_pretty(&result).expect("serialisable") + "\n";
            match &dest {
                Some(p) => {
                    write_file(p, &json)?;
                    Manifest::new("mcnemar", serde_json::Value::Null)
                        .arg("a", a.display())
                        .arg("b", b.display())
                        .input(&a)?
                        .input(&b)?
                        .write(&manifest_beside(p))?;
                }
                None => out.write_all(json.as_bytes()).map_err(|e| CliError::Runtime(e.to_string()))?,
            }
        }
    }
    Ok(())
}

/// Parses `argv` (including the program name), runs it, and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run_command(cli.command, &mut std::io::stdout()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Resolves a report written by `eval` or `transfer`.
pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(EvalReport::from_json(&text)?)
}
