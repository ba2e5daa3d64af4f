//! `proxyvid`: generate data, train, evaluate, check gradients and probe
//! language domain gaps.
//!
//! Every subcommand reads the same declarative TOML file (`--config`); all
//! keys are optional and fall back to the built-in defaults. Results are
//! printed to stdout as JSON and, where an output path is given, written
//! there as well.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use proxyvid_core::probe::{self, FeatureProvider, HashingBagOfWords, TextCorpus, TextEncoderProvider};
use proxyvid_core::synth::{self, SynthDataset};
use proxyvid_core::train::{evaluate, gradcheck_suite, held_out_indices, train, ExperimentConfig, QuerySource};
use proxyvid_core::DualEncoder;

#[derive(Parser)]
#[command(name = "proxyvid", version, about = "Video proxy encoders and omnisource contrastive training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment file with optional [data], [model], [train],
    /// [gradcheck] and [probe] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a dual encoder; writes train_log.jsonl, metrics.json,
    /// config.json and checkpoint/ under --out.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; generated from the [data] table when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Text-to-video retrieval metrics for a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also report metrics after dual-softmax re-scoring.
        #[arg(long)]
        dsl: bool,
        #[arg(long, value_enum, default_value_t = Split::HeldOut)]
        split: Split,
        #[arg(long, value_enum)]
        query: Option<Query>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every loss variant through both towers.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// NMI domain-gap probe between two one-text-per-line corpora.
    Nmi {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus_a: PathBuf,
        #[arg(long)]
        corpus_b: PathBuf,
        #[arg(long, value_enum, default_value_t = Provider::Hashing)]
        provider: Provider,
        /// Checkpoint whose text tower embeds the texts; a freshly
        /// initialised tower is used when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    HeldOut,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Query {
    Caption,
    Subtitle,
}

#[derive(Clone, Copy, ValueEnum)]
enum Provider {
    Hashing,
    Encoder,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = match &common.config {
        Some(path) => {
            let raw = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&raw).with_context(|| format!("parsing {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.data.seed = seed;
        cfg.train.seed = seed;
        cfg.gradcheck.seed = seed;
        cfg.probe.seed = seed;
    }
    Ok(cfg)
}

fn dataset(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<SynthDataset> {
    Ok(match dir {
        Some(d) => SynthDataset::load(d).with_context(|| format!("loading dataset {}", d.display()))?,
        None => synth::generate(&cfg.data)?,
    })
}

fn emit(value: &impl serde::Serialize, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    println!("{text}");
    if let Some(path) = out {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = load_config(&common)?;
            let ds = synth::generate(&cfg.data)?;
            ds.save(&out)?;
            emit(&serde_json::json!({ "records": ds.len(), "out": out }), None)?;
        }
        Command::Train { common, data, out } => {
            let cfg = load_config(&common)?;
            cfg.validate()?;
            let ds = dataset(&cfg, data.as_deref())?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
            let mut log = BufWriter::new(File::create(out.join("train_log.jsonl"))?);
            let outcome = train(&cfg, &ds, &mut log, Some(&out.join("nonfinite_snapshot")))?;
            outcome.model.save(&out.join("checkpoint"))?;
            emit(&outcome.eval, Some(&out.join("metrics.json")))?;
        }
        Command::Eval { common, checkpoint, data, dsl, split, query, out } => {
            let cfg = load_config(&common)?;
            let model = DualEncoder::load(&checkpoint)?;
            let ds = dataset(&cfg, data.as_deref())?;
            let indices = match split {
                Split::HeldOut => held_out_indices(&cfg.train, &ds),
                Split::All => (0..ds.len()).collect(),
            };
            let source = match query {
                Some(Query::Caption) => QuerySource::Caption,
                Some(Query::Subtitle) => QuerySource::Subtitle,
                None => cfg.train.query_source,
            };
            let report = evaluate(&model, &ds, &indices, source, dsl)?;
            emit(&report, out.as_deref())?;
        }
        Command::Gradcheck { common, out } => {
            let cfg = load_config(&common)?;
            let report = gradcheck_suite(&cfg.gradcheck)?;
            emit(&report, out.as_deref())?;
            if !report.passed {
                eprintln!("gradient check failed");
                return Ok(ExitCode::from(2));
            }
        }
        Command::Nmi { common, corpus_a, corpus_b, provider, checkpoint, out } => {
            let cfg = load_config(&common)?;
            let a = TextCorpus::from_file(&corpus_a)?;
            let mut b = TextCorpus::from_file(&corpus_b)?;
            if a.name == b.name {
                b.name = format!("{}#2", b.name);
            }
            let model;
            let provider: Box<dyn FeatureProvider + '_> = match provider {
                Provider::Hashing => Box::new(HashingBagOfWords::default()),
                Provider::Encoder => {
                    model = match &checkpoint {
                        Some(dir) => DualEncoder::load(dir)?,
                        None => DualEncoder::new(cfg.model.clone(), cfg.probe.seed)?,
                    };
                    let label = checkpoint.as_ref().map_or_else(|| "untrained".into(), |p| p.display().to_string());
                    Box::new(TextEncoderProvider { model: &model, label })
                }
            };
            let report = probe::probe(&a, &b, &cfg.probe, provider.as_ref())?;
            emit(&report, out.as_deref())?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
