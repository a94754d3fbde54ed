//! Toy data, error rates, latency measurement and the table experiments.

use std::ops::Range;
use std::path::PathBuf;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{Activation, AttentionKind, ChunkPredictor, Smoothing};
use crate::config::ExperimentConfig;
use crate::data::{DataError, Utterance};
use crate::encoder::Direction;
use crate::model::{Feedback, Model, ModelConfig, ModelError, Vocab};
use crate::rng::{self, streams};
use crate::speller::{Decoded, DecodeOptions, StreamOutput, StreamRecord};
use crate::tensor::{load_checkpoint, save_checkpoint, Graph, Tensor};
use crate::training::{self, evaluate, extract_chunk_labels, ChunkLabels, LabelSource, TrainOptions, TrainRecipe, TrainingError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("reference is empty")]
    EmptyReference,
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("missing checkpoint {0} and training is disabled")]
    MissingCheckpoint(PathBuf),
    #[error("unknown table row {0:?}")]
    UnknownRow(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Toy task: every token is a run of noisy copies of its own random
/// prototype vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySpec {
    pub seed: u64,
    pub n_utts: usize,
    /// Regular symbols; ids start after the reserved tokens.
    pub vocab_size: usize,
    /// Inclusive token-count range.
    pub len_range: (usize, usize),
    /// Inclusive frames-per-token range.
    pub dur_range: (usize, usize),
    pub noise_std: f64,
    pub dim: usize,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_utts: 2000,
            vocab_size: 20,
            len_range: (4, 12),
            dur_range: (4, 10),
            noise_std: 0.1,
            dim: 16,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.vocab_size < 2 {
            return Err("vocab_size must be >= 2".into());
        }
        if self.len_range.0 == 0 || self.len_range.0 > self.len_range.1 {
            return Err(format!("bad len_range {:?}", self.len_range));
        }
        if self.dur_range.0 == 0 || self.dur_range.0 > self.dur_range.1 {
            return Err(format!("bad dur_range {:?}", self.dur_range));
        }
        if !(self.noise_std >= 0.0) || self.dim == 0 {
            return Err("noise_std must be >= 0 and dim >= 1".into());
        }
        Ok(())
    }

    /// One prototype row per regular token.
    pub fn prototypes(&self) -> Vec<Vec<f64>> {
        let mut r = rng::stream(self.seed, streams::DATA);
        let n = Normal::new(0.0, 1.0).expect("unit normal");
        (0..self.vocab_size)
            .map(|_| (0..self.dim).map(|_| n.sample(&mut r)).collect())
            .collect()
    }

    /// Utterance number `index`, drawn from its own stream.
    pub fn utterance(&self, index: usize, protos: &[Vec<f64>]) -> Utterance {
        let mut r = rng::stream(self.seed, streams::DATA + 1 + index as u64);
        let noise = Normal::new(0.0, self.noise_std.max(f64::MIN_POSITIVE)).expect("finite std");
        let len = r.gen_range(self.len_range.0..=self.len_range.1);
        let mut targets = Vec::with_capacity(len);
        let mut durations = Vec::with_capacity(len);
        let mut data = Vec::new();
        let mut prev: Option<usize> = None;
        for _ in 0..len {
            // No immediate repeats, so token boundaries are visible in the frames.
            let k = loop {
                let k = r.gen_range(0..self.vocab_size);
                if Some(k) != prev {
                    break k;
                }
            };
            prev = Some(k);
            let dur = r.gen_range(self.dur_range.0..=self.dur_range.1);
            for _ in 0..dur {
                for &p in &protos[k] {
                    let e = if self.noise_std > 0.0 { noise.sample(&mut r) } else { 0.0 };
                    data.push((p + e) as f32 as f64);
                }
            }
            targets.push(Vocab::FIRST + k);
            durations.push(dur);
        }
        let t = durations.iter().sum();
        Utterance {
            id: format!("utt{index:05}"),
            frames: Tensor::new(vec![t, self.dim], data).expect("generated shape"),
            targets,
            durations,
        }
    }

    /// Utterances with indices in `range`.
    pub fn generate_range(&self, range: Range<usize>) -> Vec<Utterance> {
        let protos = self.prototypes();
        range.map(|i| self.utterance(i, &protos)).collect()
    }
}

/// The `n_utts` utterances described by `spec`.
pub fn gen_toy_dataset(spec: &ToySpec) -> Vec<Utterance> {
    spec.generate_range(0..spec.n_utts)
}

/// Train split (`0..n_utts`) and a dev split of `dev_utts` following it.
pub fn gen_toy_splits(spec: &ToySpec, dev_utts: usize) -> (Vec<Utterance>, Vec<Utterance>) {
    let train = gen_toy_dataset(spec);
    let dev = spec.generate_range(spec.n_utts..spec.n_utts + dev_utts);
    (train, dev)
}

/// Summary statistics of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Audit {
    pub utts: usize,
    pub mean_tokens: f64,
    pub mean_duration: f64,
    pub mean_frames: f64,
    pub symbols_used: usize,
}

/// Checks every generated utterance against `spec` and summarises.
pub fn audit(utts: &[Utterance], spec: &ToySpec) -> Result<Audit, String> {
    let mut used = vec![false; spec.vocab_size];
    let (mut tokens, mut frames) = (0usize, 0usize);
    for u in utts {
        u.validate().map_err(|e| e.to_string())?;
        let n = u.targets.len();
        if n < spec.len_range.0 || n > spec.len_range.1 {
            return Err(format!("{}: {n} tokens outside {:?}", u.id, spec.len_range));
        }
        if u.durations.iter().any(|&d| d < spec.dur_range.0 || d > spec.dur_range.1) {
            return Err(format!("{}: duration outside {:?}", u.id, spec.dur_range));
        }
        if u.dim() != spec.dim {
            return Err(format!("{}: dim {} != {}", u.id, u.dim(), spec.dim));
        }
        for w in u.targets.windows(2) {
            if w[0] == w[1] {
                return Err(format!("{}: repeated adjacent token", u.id));
            }
        }
        for &t in &u.targets {
            let k = t.checked_sub(Vocab::FIRST).filter(|&k| k < spec.vocab_size);
            used[k.ok_or_else(|| format!("{}: token {t} outside vocabulary", u.id))?] = true;
        }
        tokens += n;
        frames += u.num_frames();
    }
    let n = utts.len().max(1) as f64;
    Ok(Audit {
        utts: utts.len(),
        mean_tokens: tokens as f64 / n,
        mean_duration: frames as f64 / tokens.max(1) as f64,
        mean_frames: frames as f64 / n,
        symbols_used: used.iter().filter(|&&b| b).count(),
    })
}

/// Edit distance with unit costs.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by the reference length.
pub fn cer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64, HarnessError> {
    if reference.is_empty() {
        return Err(HarnessError::EmptyReference);
    }
    Ok(levenshtein(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Trace of an offline decode: every token waits for the whole input.
pub fn offline_trace(decoded: &Decoded, num_frames: usize) -> Vec<StreamRecord> {
    let mut tokens = decoded.tokens.clone();
    if decoded.steps.len() > tokens.len() {
        tokens.push(Vocab::EOS);
    }
    tokens
        .iter()
        .zip(&decoded.steps)
        .map(|(&token, s)| StreamRecord {
            token,
            boundary_u: s.boundary_u,
            chunk_len: s.chunk_len,
            frames_consumed: num_frames,
        })
        .collect()
}

/// Lookahead of emitted tokens beyond the true end of their reference token.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LatencyProfile {
    pub mean: f64,
    pub max: i64,
    /// One entry per scored token.
    pub lookahead: Vec<i64>,
    pub utterances: usize,
    /// Utterances whose trace emitted nothing.
    pub excluded: usize,
}

/// Compares each emitted non-EOS token `i` with the end frame of reference
/// token `i`. Tokens past the reference length are not scored.
pub fn latency_profile(traces: &[(&[StreamRecord], &Utterance)]) -> LatencyProfile {
    let mut p = LatencyProfile::default();
    for (trace, utt) in traces {
        let emitted: Vec<&StreamRecord> = trace.iter().filter(|r| r.token != Vocab::EOS).collect();
        if emitted.is_empty() {
            p.excluded += 1;
            continue;
        }
        p.utterances += 1;
        for (r, end) in emitted.iter().zip(utt.token_ends()) {
            p.lookahead.push(r.frames_consumed as i64 - end as i64);
        }
    }
    if !p.lookahead.is_empty() {
        p.mean = p.lookahead.iter().sum::<i64>() as f64 / p.lookahead.len() as f64;
        p.max = *p.lookahead.iter().max().expect("nonempty");
    }
    p
}

/// Raw frames a streaming decoder may read before emitting a token whose
/// boundary is `boundary_u`.
pub fn frame_bound(boundary_u: usize, subsampling: usize, smoothing: Smoothing, nc: usize, nr: usize) -> usize {
    let w = match smoothing {
        Smoothing::None => 0,
        Smoothing::M1 { w } | Smoothing::M2 { w } => w,
    };
    subsampling * (boundary_u + w) + nc + nr
}

/// Records reading past [`frame_bound`].
pub fn latency_violations(trace: &[StreamRecord], model: &Model) -> Result<usize, ModelError> {
    let (nc, nr) = model.encoder().stack().streaming_geometry()?;
    let f = model.subsampling();
    let sm = model.config.attention.smoothing;
    Ok(trace
        .iter()
        .filter(|r| r.frames_consumed > frame_bound(r.boundary_u, f, sm, nc, nr))
        .count())
}

/// Frames of `utt` as an infallible frame source.
pub fn frame_source(utt: &Utterance) -> impl Iterator<Item = Result<Vec<f64>, std::convert::Infallible>> + '_ {
    (0..utt.num_frames()).map(move |t| Ok(utt.frames.row(t).to_vec()))
}

/// Streams every utterance through `model`.
pub fn stream_all(model: &Model, utts: &[Utterance], opts: &DecodeOptions, workers: usize) -> Result<Vec<StreamOutput>, ModelError> {
    training::with_workers(workers, || {
        utts.par_iter()
            .map(|u| crate::speller::streaming_decode(model, frame_source(u), opts))
            .collect()
    })
}

pub const ATTENTION_HEADER: &str = "step,u,alpha,beta,chunk_len";

/// Teacher-forced attention of `model` on `utt` as CSV rows, one per
/// (output step, listener position).
pub fn dump_attention(model: &Model, utt: &Utterance) -> Result<String, ModelError> {
    let mut g = Graph::inference();
    let out = model.forward_train(&mut g, &utt.frames, &utt.targets, &mut Feedback::teacher_forced())?;
    let mut s = String::from(ATTENTION_HEADER);
    s.push('\n');
    for (i, row) in out.attention.iter().enumerate() {
        for u in 0..row.alpha.len() {
            s.push_str(&format!(
                "{},{},{:.6e},{:.6e},{}\n",
                i + 1,
                u + 1,
                row.alpha[u],
                row.beta[u],
                row.chunk_len[u]
            ));
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Table {
    /// Listener variants with global attention.
    T1,
    /// Chunk-length label sources and predictors.
    T2,
    /// Boundary-shift compensation for streaming listeners.
    T3,
}

impl std::str::FromStr for Table {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "t1" | "1" => Ok(Table::T1),
            "t2" | "2" => Ok(Table::T2),
            "t3" | "3" => Ok(Table::T3),
            _ => Err(format!("unknown table {s:?}; expected t1, t2 or t3")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ListenerVariant {
    Bi,
    Uni,
    Lc { nc: usize, nr: usize },
}

/// One model of a table.
#[derive(Debug, Clone, PartialEq)]
pub struct RowSpec {
    pub name: String,
    pub listener: ListenerVariant,
    pub kind: AttentionKind,
    pub smoothing: Smoothing,
    /// Row whose trained parameters initialise this one.
    pub init_from: Option<String>,
    /// Row whose decodes provide chunk-length labels.
    pub labels_from: Option<(String, LabelSource)>,
}

impl RowSpec {
    fn new(name: &str, listener: ListenerVariant, kind: AttentionKind) -> Self {
        Self {
            name: name.to_string(),
            listener,
            kind,
            smoothing: Smoothing::None,
            init_from: None,
            labels_from: None,
        }
    }

    fn smoothed(mut self, s: Smoothing) -> Self {
        self.smoothing = s;
        self
    }

    fn init(mut self, from: &str) -> Self {
        self.init_from = Some(from.to_string());
        self
    }

    fn labels(mut self, from: &str, source: LabelSource) -> Self {
        self.labels_from = Some((from.to_string(), source));
        self
    }

    /// Directory-safe form of the row name.
    pub fn slug(&self) -> String {
        self.name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
            .collect::<String>()
            .split('-')
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join("-")
    }

    /// `base` with this row's listener and attender.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        let dir = match self.listener {
            ListenerVariant::Bi => Direction::Bi,
            ListenerVariant::Uni => Direction::Uni,
            ListenerVariant::Lc { nc, nr } => {
                cfg.encoder.lc_block_len = nc;
                cfg.encoder.lc_right_context = nr;
                Direction::LatencyControlled
            }
        };
        for l in &mut cfg.encoder.layers {
            l.direction = dir;
        }
        cfg.attention.kind = self.kind;
        cfg.attention.smoothing = self.smoothing;
        cfg
    }
}

/// Table geometry at toy scale.
#[derive(Debug, Clone, PartialEq)]
pub struct TableOptions {
    pub base: ExperimentConfig,
    /// Recipe for rows initialised from another row.
    pub finetune: TrainRecipe,
    pub mocha_chunk: usize,
    pub w_max: usize,
    /// Block and right context (raw frames) of the main streaming listener.
    pub lc: (usize, usize),
    pub out_dir: PathBuf,
    pub train: bool,
    pub workers: usize,
    /// Restricts the run to these row names (and the rows they depend on).
    pub only: Option<Vec<String>>,
}

impl TableOptions {
    pub fn new(base: ExperimentConfig, out_dir: PathBuf) -> Self {
        let finetune = base.recipe.scaled((base.recipe.epochs * 14).div_ceil(30).max(1));
        Self {
            base,
            finetune,
            mocha_chunk: 2,
            w_max: 8,
            lc: (64, 32),
            out_dir,
            train: true,
            workers: 1,
            only: None,
        }
    }
}

/// Listener and speller sizes for the toy task: three 32-unit
/// bidirectional layers (pyramid on the last two), a 64-unit speller.
pub fn toy_model_config() -> ModelConfig {
    let layer = |pyramid_input| crate::encoder::LayerSpec {
        direction: Direction::Bi,
        hidden_units: 32,
        pyramid_input,
    };
    ModelConfig {
        input_dim: 16,
        vocab_size: 20,
        encoder: crate::encoder::EncoderStack {
            layers: vec![layer(false), layer(true), layer(true)],
            lc_block_len: 64,
            lc_right_context: 32,
        },
        attention: crate::attention::AttentionConfig {
            energy_dim: 32,
            predictor_dim: 32,
            ..Default::default()
        },
        speller_hidden: 64,
        embed_dim: 16,
    }
}

/// The default schedule compressed to `epochs`, with Adam at a toy-scale
/// learning rate and small minibatches.
pub fn toy_recipe(epochs: usize) -> TrainRecipe {
    TrainRecipe {
        lr: 5e-3,
        optimizer: crate::training::Optimizer::adam(),
        batch_size: 8,
        ..TrainRecipe::compressed(epochs)
    }
}

/// Experiment config for the toy task.
pub fn toy_experiment(epochs: usize) -> ExperimentConfig {
    ExperimentConfig {
        model: toy_model_config(),
        recipe: toy_recipe(epochs),
        ..ExperimentConfig::default()
    }
}

pub const BASELINE_ROW: &str = "BLSTM-GSA";

/// Rows of `table`; the first row is the baseline.
pub fn table_rows(table: Table, opts: &TableOptions) -> Vec<RowSpec> {
    use ListenerVariant::*;
    let (nc, nr) = opts.lc;
    let lc = Lc { nc, nr };
    let mocha = AttentionKind::Mocha { chunk: opts.mocha_chunk };
    let constrained = AttentionKind::Amocha {
        predictor: ChunkPredictor::Constrained {
            w_max: opts.w_max,
            activation: Activation::Relu,
        },
    };
    let unconstrained = AttentionKind::Amocha {
        predictor: ChunkPredictor::Unconstrained {
            activation: Activation::Relu,
        },
    };
    let gsa = AttentionKind::Gsa;
    let base = RowSpec::new(BASELINE_ROW, Bi, gsa);
    let source = opts.base.recipe.chunk_label_source;
    match table {
        Table::T1 => vec![
            base,
            RowSpec::new("LSTM-GSA", Uni, gsa),
            RowSpec::new(&format!("LC-GSA({nc},{nr}) scratch"), lc, gsa),
            RowSpec::new(&format!("LC-GSA({nc},{nr}) init"), lc, gsa).init(BASELINE_ROW),
            RowSpec::new(&format!("LC-GSA({},{}) init", nc / 2, nr / 2), Lc { nc: nc / 2, nr: nr / 2 }, gsa)
                .init(BASELINE_ROW),
        ],
        Table::T2 => vec![
            base,
            RowSpec::new(&format!("MoChA W={}", opts.mocha_chunk), Bi, mocha).init(BASELINE_ROW),
            RowSpec::new("AMoChA-C BS1", Bi, constrained)
                .init(BASELINE_ROW)
                .labels(BASELINE_ROW, LabelSource::Greedy),
            RowSpec::new("AMoChA-C BS5", Bi, constrained)
                .init(BASELINE_ROW)
                .labels(BASELINE_ROW, LabelSource::Beam),
            RowSpec::new("AMoChA-U BS5", Bi, unconstrained)
                .init(BASELINE_ROW)
                .labels(BASELINE_ROW, LabelSource::Beam),
        ],
        Table::T3 => {
            let mut rows = vec![base, RowSpec::new("LC-MoChA", lc, mocha).init(BASELINE_ROW)];
            for (tag, w) in [("M1", 8), ("M1", 10), ("M2", 8), ("M2", 10)] {
                let sm = if tag == "M1" { Smoothing::M1 { w } } else { Smoothing::M2 { w } };
                rows.push(RowSpec::new(&format!("LC-MoChA {tag} w={w}"), lc, mocha).smoothed(sm).init(BASELINE_ROW));
            }
            rows.push(
                RowSpec::new("LC-AMoChA M2 w=10", lc, constrained)
                    .smoothed(Smoothing::M2 { w: 10 })
                    .init(BASELINE_ROW)
                    .labels(BASELINE_ROW, source),
            );
            rows
        }
    }
}

/// One evaluated row.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub name: String,
    pub cer: f64,
    /// `(baseline - row) / baseline`; negative means worse than baseline.
    pub rel_change: f64,
}

pub const TABLE_HEADER: &str = "model,cer,rel_change_pct";

pub fn table_csv(rows: &[TableRow]) -> String {
    let mut s = format!("{TABLE_HEADER}\n");
    for r in rows {
        let rel = if r.rel_change.is_finite() {
            format!("{:.2}", 100.0 * r.rel_change)
        } else {
            String::new()
        };
        s.push_str(&format!("{},{:.4},{rel}\n", r.name, 100.0 * r.cer));
    }
    s
}

/// Relative change against the baseline CER; `NaN` when the baseline is 0.
pub fn relative_change(row_cer: f64, baseline_cer: f64) -> f64 {
    if baseline_cer > 0.0 {
        (baseline_cer - row_cer) / baseline_cer
    } else if row_cer == 0.0 {
        0.0
    } else {
        f64::NAN
    }
}

/// Train and dev sets of `cfg`: files when configured, generated otherwise.
pub fn load_splits(cfg: &ExperimentConfig) -> Result<(Vec<Utterance>, Vec<Utterance>), DataError> {
    let (mut train, mut dev) = gen_toy_splits(&cfg.data.generator, cfg.data.dev_utts);
    if let Some(p) = &cfg.data.train_path {
        train = crate::data::load_dataset(p)?;
    }
    if let Some(p) = &cfg.data.dev_path {
        dev = crate::data::load_dataset(p)?;
    }
    Ok((train, dev))
}

/// Trains (or loads) and evaluates every requested row of `table`, writing
/// checkpoints and metrics under `out_dir` and the results CSV to
/// `out_dir/<table>.csv`.
pub fn run_table_experiment(table: Table, opts: &TableOptions) -> Result<Vec<TableRow>, HarnessError> {
    let all = table_rows(table, opts);
    let wanted = |r: &RowSpec| match &opts.only {
        None => true,
        Some(names) => names.contains(&r.name) || r.name == BASELINE_ROW,
    };
    if let Some(names) = &opts.only {
        for n in names {
            if !all.iter().any(|r| &r.name == n) {
                return Err(HarnessError::UnknownRow(n.clone()));
            }
        }
    }
    let (train, dev) = load_splits(&opts.base)?;
    let mut trained: Vec<(String, Model)> = Vec::new();
    let mut results = Vec::new();
    let mut baseline_cer = f64::NAN;
    for row in all.iter().filter(|r| wanted(r)) {
        let model = train_row(row, opts, &train, &dev, &trained)?;
        let ev = evaluate(&model, &dev, None, &opts.base.recipe, &opts.base.decode, opts.workers)?;
        if row.name == BASELINE_ROW {
            baseline_cer = ev.cer;
        }
        log::info!("{}: dev cer {:.4}", row.name, ev.cer);
        results.push(TableRow {
            name: row.name.clone(),
            cer: ev.cer,
            rel_change: relative_change(ev.cer, baseline_cer),
        });
        trained.push((row.name.clone(), model));
    }
    let name = match table {
        Table::T1 => "t1",
        Table::T2 => "t2",
        Table::T3 => "t3",
    };
    crate::io::atomic_write(&opts.out_dir.join(format!("{name}.csv")), table_csv(&results).as_bytes())?;
    Ok(results)
}

fn train_row(
    row: &RowSpec,
    opts: &TableOptions,
    train: &[Utterance],
    dev: &[Utterance],
    trained: &[(String, Model)],
) -> Result<Model, HarnessError> {
    let cfg = row.model_config(&opts.base.model);
    let mut init_rng = rng::stream(opts.base.seed, streams::INIT);
    let mut model = Model::new(cfg, &mut init_rng)?;
    let dir = opts.out_dir.join(row.slug());
    let final_dir = dir.join("final");
    if final_dir.join("manifest.txt").exists() {
        let entries = load_checkpoint(&final_dir).map_err(ModelError::from)?;
        model.init_from(&entries)?;
        return Ok(model);
    }
    if !opts.train {
        return Err(HarnessError::MissingCheckpoint(final_dir));
    }
    let find = |name: &str| {
        trained
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| HarnessError::UnknownRow(name.to_string()))
    };
    let recipe = if let Some(src) = &row.init_from {
        let entries: Vec<(String, Tensor)> = find(src)?
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        model.init_from(&entries)?;
        &opts.finetune
    } else {
        &opts.base.recipe
    };
    let labels: Option<ChunkLabels> = match &row.labels_from {
        Some((src, source)) => {
            let (l, skipped) = extract_chunk_labels(find(src)?, train, *source, recipe.chunk_label_threshold, opts.workers)?;
            log::info!("{}: chunk labels for {} utterances, {skipped} skipped", row.name, l.len());
            Some(l)
        }
        None => None,
    };
    let topts = TrainOptions {
        seed: opts.base.seed,
        workers: opts.workers,
        checkpoint_dir: None,
        metrics_path: Some(dir.join("metrics.csv")),
        dev_decode: Some(DecodeOptions::greedy()),
    };
    training::train(&mut model, train, dev, recipe, labels.as_ref(), &topts)?;
    save_checkpoint(&model.params, &final_dir).map_err(ModelError::from)?;
    Ok(model)
}
