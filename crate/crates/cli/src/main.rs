//! `las`: train, decode and stream-simulate listener-attender-speller models
//! described by a JSON experiment config.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use las_core::config::ExperimentConfig;
use las_core::data::{self, Utterance};
use las_core::harness::{self, Table, TableOptions};
use las_core::model::Model;
use las_core::rng::{self, streams};
use las_core::speller::{decode, DecodeOptions};
use las_core::tensor::load_checkpoint;
use las_core::training::{self, LabelSource, TrainOptions};

#[derive(Parser)]
#[command(name = "las", version, about)]
struct Cli {
    /// Worker threads for per-utterance parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints and a metrics CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Offline decoding of a split to JSON lines.
    Decode {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Dev)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Frame-by-frame streaming decoding with a per-token latency trace.
    StreamSim {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Dev)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        /// Trace CSV; defaults to the output path with a `.trace.csv` suffix.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Chunk-length labels from a trained model's decodes of the train split.
    ExtractChunkLabels {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        source: Option<Source>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the rows of one experiment table.
    RunTable {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        table: Table,
        #[arg(long)]
        out_dir: PathBuf,
        /// Restrict to these rows (the baseline always runs).
        #[arg(long = "row")]
        rows: Vec<String>,
        /// Epochs for rows initialised from another row.
        #[arg(long)]
        finetune_epochs: Option<usize>,
        /// Fail instead of training rows without a checkpoint.
        #[arg(long)]
        no_train: bool,
    },
    /// Teacher-forced attention weights of one utterance as CSV.
    DumpAttention {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Utterance id, or its index in the generated corpus.
        #[arg(long)]
        utt: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the configured train and dev sets as JSON lines.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Print the complete default config as JSON.
    DefaultConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Dev,
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Greedy,
    Beam,
}

/// Failure classes with their own exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Config = 2,
    Data = 3,
    Checkpoint = 4,
}

#[derive(Debug)]
struct Classified {
    kind: Kind,
    inner: anyhow::Error,
}

impl fmt::Display for Classified {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.inner)
    }
}

impl std::error::Error for Classified {}

trait Classify<T> {
    fn kind(self, kind: Kind) -> Result<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for std::result::Result<T, E> {
    fn kind(self, kind: Kind) -> Result<T> {
        self.map_err(|e| Classified { kind, inner: e.into() }.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Classified>().map_or(1, |c| c.kind as u8);
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let workers = cli.workers.max(1);
    match cli.command {
        Command::Train { config } => train(&load_config(&config)?, workers),
        Command::Decode { config, ckpt, split, out } => {
            let cfg = load_config(&config)?;
            let model = load_model(&cfg, &ckpt)?;
            let utts = pick(load_splits(&cfg)?, split);
            let lines = training::with_workers(workers, || {
                use rayon::prelude::*;
                utts.par_iter()
                    .map(|u| -> Result<String> {
                        let d = decode(&model, &u.frames, &cfg.decode).with_context(|| format!("decoding {}", u.id))?;
                        let trace = harness::offline_trace(&d, u.num_frames());
                        Ok(json_line(&DecodeLine {
                            id: &u.id,
                            tokens: &d.tokens,
                            score: d.score,
                            frames_consumed_per_token: trace.iter().take(d.tokens.len()).map(|r| r.frames_consumed).collect(),
                        }))
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            write(&out, &lines.concat())
        }
        Command::StreamSim {
            config,
            ckpt,
            split,
            out,
            trace,
        } => {
            let cfg = load_config(&config)?;
            let model = load_model(&cfg, &ckpt)?;
            model.encoder().stack().streaming_geometry().kind(Kind::Config)?;
            if !model.config.attention.kind.is_monotonic() {
                return Err(anyhow!("global attention cannot stream")).kind(Kind::Config);
            }
            let utts = pick(load_splits(&cfg)?, split);
            let opts = DecodeOptions { beam: 1, ..cfg.decode };
            let outs = harness::stream_all(&model, &utts, &opts, workers)?;
            let mut lines = String::new();
            let mut csv = String::from("id,step,token,boundary_u,chunk_len,frames_consumed\n");
            let mut violations = 0;
            for (u, o) in utts.iter().zip(&outs) {
                lines.push_str(&json_line(&DecodeLine {
                    id: &u.id,
                    tokens: &o.tokens,
                    score: o.score,
                    frames_consumed_per_token: o.trace.iter().take(o.tokens.len()).map(|r| r.frames_consumed).collect(),
                }));
                for (i, r) in o.trace.iter().enumerate() {
                    csv.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        u.id,
                        i + 1,
                        r.token,
                        r.boundary_u,
                        r.chunk_len,
                        r.frames_consumed
                    ));
                }
                violations += harness::latency_violations(&o.trace, &model)?;
            }
            let trace = trace.unwrap_or_else(|| suffixed(&out, ".trace.csv"));
            write(&out, &lines)?;
            write(&trace, &csv)?;
            let pairs: Vec<_> = outs.iter().zip(&utts).map(|(o, u)| (o.trace.as_slice(), u)).collect();
            let p = harness::latency_profile(&pairs);
            eprintln!(
                "{} utterances; lookahead mean {:.1} max {} frames; {violations} latency-bound violations",
                p.utterances, p.mean, p.max
            );
            if violations > 0 {
                bail!("{violations} tokens read past the latency bound");
            }
            Ok(())
        }
        Command::ExtractChunkLabels {
            config,
            ckpt,
            source,
            out,
        } => {
            let cfg = load_config(&config)?;
            let model = load_model(&cfg, &ckpt)?;
            let (train, _) = load_splits(&cfg)?;
            let source = match source {
                Some(Source::Greedy) => LabelSource::Greedy,
                Some(Source::Beam) => LabelSource::Beam,
                None => cfg.recipe.chunk_label_source,
            };
            let (labels, skipped) =
                training::extract_chunk_labels(&model, &train, source, cfg.recipe.chunk_label_threshold, workers)
                    .kind(Kind::Config)?;
            training::save_chunk_labels(&out, &labels).with_context(|| format!("writing {}", out.display()))?;
            eprintln!("labels for {} utterances, {skipped} skipped", labels.len());
            Ok(())
        }
        Command::RunTable {
            config,
            table,
            out_dir,
            rows,
            finetune_epochs,
            no_train,
        } => {
            let cfg = load_config(&config)?;
            let mut opts = TableOptions::new(cfg, out_dir.clone());
            if let Some(e) = finetune_epochs {
                opts.finetune = opts.base.recipe.scaled(e);
            }
            opts.workers = workers;
            opts.train = !no_train;
            if !rows.is_empty() {
                opts.only = Some(rows);
            }
            let result = harness::run_table_experiment(table, &opts).map_err(|e| match e {
                harness::HarnessError::Data(_) => Classified {
                    kind: Kind::Data,
                    inner: e.into(),
                }
                .into(),
                harness::HarnessError::MissingCheckpoint(_) => Classified {
                    kind: Kind::Checkpoint,
                    inner: e.into(),
                }
                .into(),
                harness::HarnessError::UnknownRow(_) => Classified {
                    kind: Kind::Config,
                    inner: e.into(),
                }
                .into(),
                other => anyhow::Error::from(other),
            })?;
            print!("{}", harness::table_csv(&result));
            Ok(())
        }
        Command::DumpAttention { config, ckpt, utt, out } => {
            let cfg = load_config(&config)?;
            let model = load_model(&cfg, &ckpt)?;
            let (train, dev) = load_splits(&cfg)?;
            let u = find_utterance(&utt, dev.iter().chain(&train))?;
            write(&out, &harness::dump_attention(&model, u)?)
        }
        Command::GenData { config, out_dir } => {
            let cfg = load_config(&config)?;
            let (train, dev) = load_splits(&cfg)?;
            for (name, set) in [("train.jsonl", &train), ("dev.jsonl", &dev)] {
                data::save_dataset(&out_dir.join(name), set).kind(Kind::Data)?;
            }
            if cfg.data.train_path.is_none() {
                let a = harness::audit(&train, &cfg.data.generator).map_err(|m| anyhow!(m)).kind(Kind::Data)?;
                eprintln!("{a:?}");
            }
            Ok(())
        }
        Command::DefaultConfig => {
            println!("{}", ExperimentConfig::default().to_json());
            Ok(())
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).kind(Kind::Config)
}

fn load_splits(cfg: &ExperimentConfig) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
    harness::load_splits(cfg).kind(Kind::Data)
}

fn pick((train, dev): (Vec<Utterance>, Vec<Utterance>), split: Split) -> Vec<Utterance> {
    match split {
        Split::Train => train,
        Split::Dev => dev,
    }
}

/// `ckpt` as given, or relative to the configured checkpoint directory.
fn resolve_ckpt(cfg: &ExperimentConfig, ckpt: &Path) -> PathBuf {
    if ckpt.exists() {
        ckpt.to_path_buf()
    } else {
        cfg.io.checkpoint_dir.join(ckpt)
    }
}

fn load_model(cfg: &ExperimentConfig, ckpt: &Path) -> Result<Model> {
    let dir = resolve_ckpt(cfg, ckpt);
    let mut model = Model::new(cfg.model.clone(), &mut rng::stream(cfg.seed, streams::INIT)).kind(Kind::Config)?;
    let entries = load_checkpoint(&dir)
        .with_context(|| format!("loading checkpoint {}", dir.display()))
        .kind(Kind::Checkpoint)?;
    let n = model.init_from(&entries).kind(Kind::Checkpoint)?;
    if n != model.params.len() {
        return Err(anyhow!(
            "checkpoint {} covers {n} of {} parameters",
            dir.display(),
            model.params.len()
        ))
        .kind(Kind::Checkpoint);
    }
    Ok(model)
}

fn train(cfg: &ExperimentConfig, workers: usize) -> Result<()> {
    let (train_set, dev) = load_splits(cfg)?;
    let mut model = Model::new(cfg.model.clone(), &mut rng::stream(cfg.seed, streams::INIT)).kind(Kind::Config)?;
    if let Some(from) = &cfg.init.init_from {
        let entries = load_checkpoint(from)
            .with_context(|| format!("loading checkpoint {}", from.display()))
            .kind(Kind::Checkpoint)?;
        let n = model.init_from(&entries).kind(Kind::Checkpoint)?;
        log::info!("initialised {n} of {} parameters from {}", model.params.len(), from.display());
    }
    let labels = match &cfg.init.chunk_labels {
        Some(p) => Some(
            training::load_chunk_labels(p)
                .with_context(|| format!("reading chunk labels {}", p.display()))
                .kind(Kind::Data)?,
        ),
        None => None,
    };
    let opts = TrainOptions {
        seed: cfg.seed,
        workers,
        checkpoint_dir: Some(cfg.io.checkpoint_dir.clone()),
        metrics_path: Some(cfg.io.log_dir.join("metrics.csv")),
        dev_decode: Some(DecodeOptions { beam: 1, ..cfg.decode }),
    };
    let rows = training::train(&mut model, &train_set, &dev, &cfg.recipe, labels.as_ref(), &opts).map_err(|e| match e {
        training::TrainingError::Recipe(_) => Classified {
            kind: Kind::Config,
            inner: e.into(),
        }
        .into(),
        other => anyhow::Error::from(other),
    })?;
    if let Some(last) = rows.iter().rev().find(|r| r.split == "dev") {
        eprintln!("epoch {}: dev loss {:.4}, dev cer {:.4}", last.epoch, last.loss, last.cer.unwrap_or(f64::NAN));
    }
    Ok(())
}

fn find_utterance<'a>(key: &str, mut utts: impl Iterator<Item = &'a Utterance>) -> Result<&'a Utterance> {
    let by_index = key
        .trim_start_matches(|c: char| !c.is_ascii_digit())
        .parse::<usize>()
        .ok()
        .map(|i| format!("utt{i:05}"));
    utts.find(|u| u.id == key || Some(&u.id) == by_index.as_ref())
        .ok_or_else(|| anyhow!("no utterance {key:?}"))
        .kind(Kind::Data)
}

#[derive(Serialize)]
struct DecodeLine<'a> {
    id: &'a str,
    tokens: &'a [usize],
    score: f64,
    /// Raw frames read when each token of `tokens` was emitted.
    frames_consumed_per_token: Vec<usize>,
}

fn json_line<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string(v).expect("serialisable");
    s.push('\n');
    s
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write(path: &Path, text: &str) -> Result<()> {
    las_core::io::atomic_write(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}
