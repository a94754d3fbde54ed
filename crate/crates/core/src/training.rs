//! Losses, the training recipe, chunk-length label extraction and the
//! training loop.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::AttentionKind;
use crate::data::Utterance;
use crate::model::{Feedback, Model, ModelError, Vocab};
use crate::rng::{self, streams};
use crate::speller::{decode, DecodeOptions};
use crate::tensor::{save_checkpoint, CheckpointError, Graph, ParamStore, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("invalid recipe: {0}")]
    Recipe(String),
    #[error("dataset is empty")]
    EmptyDataset,
}

/// Scheduled-sampling ramp: teacher forcing before `start`, a linear rise
/// that reaches `final_rate` at `end`, constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingRamp {
    pub start_epoch: usize,
    pub end_epoch: usize,
    pub final_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Greedy,
    Beam,
    ExternalFile,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRecipe {
    pub epochs: usize,
    /// Epochs fed only with reference tokens.
    pub teacher_force_epochs: usize,
    pub ss_ramp: SamplingRamp,
    pub lr: f64,
    /// First epoch run at half the learning rate.
    pub lr_halve_from_epoch: usize,
    pub label_smoothing: f64,
    pub weight_decay: f64,
    /// Weight of the chunk-length loss.
    pub lambda: f64,
    pub chunk_label_source: LabelSource,
    pub chunk_label_threshold: f64,
    pub optimizer: Optimizer,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub shuffle: bool,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        Self {
            epochs: 30,
            teacher_force_epochs: 11,
            ss_ramp: SamplingRamp {
                start_epoch: 12,
                end_epoch: 17,
                final_rate: 0.3,
            },
            lr: 0.0002,
            lr_halve_from_epoch: 24,
            label_smoothing: 0.1,
            weight_decay: 1e-5,
            lambda: 0.02,
            chunk_label_source: LabelSource::Beam,
            chunk_label_threshold: 0.01,
            optimizer: Optimizer::Sgd,
            grad_clip: 5.0,
            batch_size: 1,
            shuffle: true,
        }
    }
}

impl TrainRecipe {
    /// The default schedule with every epoch milestone scaled to `epochs`.
    pub fn compressed(epochs: usize) -> Self {
        Self::default().scaled(epochs)
    }

    /// This recipe with its epoch milestones scaled to `epochs`.
    pub fn scaled(&self, epochs: usize) -> Self {
        let scale = |e: usize| ((e as f64 * epochs as f64 / self.epochs.max(1) as f64).round() as usize).max(1);
        let start = scale(self.ss_ramp.start_epoch);
        Self {
            epochs,
            teacher_force_epochs: start - 1,
            ss_ramp: SamplingRamp {
                start_epoch: start,
                end_epoch: scale(self.ss_ramp.end_epoch).max(start),
                final_rate: self.ss_ramp.final_rate,
            },
            lr_halve_from_epoch: scale(self.lr_halve_from_epoch),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |m: &str| Err(TrainingError::Recipe(m.to_string()));
        if !(0.0..=1.0).contains(&self.ss_ramp.final_rate) {
            return bad("ss_ramp.final_rate must be in [0, 1]");
        }
        if self.ss_ramp.start_epoch == 0 || self.ss_ramp.end_epoch < self.ss_ramp.start_epoch {
            return bad("ss_ramp needs 1 <= start_epoch <= end_epoch");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must be in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must be in [0, 1)");
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || !(self.grad_clip > 0.0) {
            return bad("lr and grad_clip must be positive, weight_decay nonnegative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        Ok(())
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_halve_from_epoch {
            self.lr * 0.5
        } else {
            self.lr
        }
    }
}

/// Probability of feeding a sampled token at 1-based `epoch`. The ramp is
/// linear from zero at `start_epoch - 1` to `final_rate` at `end_epoch`.
pub fn scheduled_sampling_rate(epoch: usize, recipe: &TrainRecipe) -> f64 {
    let r = recipe.ss_ramp;
    if epoch <= recipe.teacher_force_epochs || epoch < r.start_epoch {
        return 0.0;
    }
    if epoch >= r.end_epoch {
        return r.final_rate;
    }
    let zero = (r.start_epoch - 1) as f64;
    r.final_rate * (epoch as f64 - zero) / (r.end_epoch as f64 - zero)
}

/// Mean over steps of the cross-entropy between `(1 - smoothing) * onehot +
/// smoothing * uniform` and the softmax of each logit vector.
pub fn ce_loss_label_smoothed(g: &mut Graph, logits: &[Var], targets: &[usize], smoothing: f64) -> Result<Var, TrainingError> {
    if logits.len() != targets.len() {
        return Err(TrainingError::LengthMismatch {
            what: "targets",
            got: targets.len(),
            expected: logits.len(),
        });
    }
    let mut terms = Vec::with_capacity(logits.len());
    for (&z, &t) in logits.iter().zip(targets) {
        let v = g.shape(z)[0];
        if t >= v {
            return Err(ModelError::UnknownToken(t).into());
        }
        let mut q = vec![smoothing / v as f64; v];
        q[t] += 1.0 - smoothing;
        let lp = g.log_softmax(z);
        let q = g.constant_vec(q);
        terms.push(g.dot(lp, q)?);
    }
    let all = g.concat(&terms)?;
    let m = g.mean(all);
    Ok(g.scale(m, -1.0))
}

/// Mean squared error between predicted and reference chunk lengths.
pub fn length_loss(g: &mut Graph, predicted: &[Var], truth: &[f64]) -> Result<Var, TrainingError> {
    if predicted.len() != truth.len() {
        return Err(TrainingError::LengthMismatch {
            what: "chunk labels",
            got: truth.len(),
            expected: predicted.len(),
        });
    }
    if predicted.is_empty() {
        return Ok(g.constant_vec(vec![0.0]));
    }
    let p = g.concat(predicted)?;
    let t = g.constant_vec(truth.to_vec());
    let d = g.sub(p, t)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// `(1 - lambda) * ce + lambda * mse(predicted, truth)`. Returns the total
/// and the length term.
pub fn multitask_loss(
    g: &mut Graph,
    ce: Var,
    predicted: &[Var],
    truth: &[f64],
    lambda: f64,
) -> Result<(Var, Var), TrainingError> {
    let lw = length_loss(g, predicted, truth)?;
    let a = g.scale(ce, 1.0 - lambda);
    let b = g.scale(lw, lambda);
    Ok((g.add(a, b)?, lw))
}

/// Loss values of one utterance.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub loss: f64,
    pub ce: f64,
    pub lw: f64,
}

/// Builds the training loss of one utterance on `g`.
pub fn utterance_loss(
    model: &Model,
    g: &mut Graph,
    utt: &Utterance,
    labels: Option<&[usize]>,
    recipe: &TrainRecipe,
    feedback: &mut Feedback<'_>,
) -> Result<(Var, LossParts), TrainingError> {
    let out = model.forward_train(g, &utt.frames, &utt.targets, feedback)?;
    let mut refs = utt.targets.clone();
    refs.push(Vocab::EOS);
    let ce = ce_loss_label_smoothed(g, &out.logits, &refs, recipe.label_smoothing)?;
    let adaptive = matches!(model.config.attention.kind, AttentionKind::Amocha { .. });
    let (loss, lw) = match labels {
        Some(l) if adaptive => {
            let truth: Vec<f64> = l.iter().map(|&x| x as f64).collect();
            let (total, lw) = multitask_loss(g, ce, &out.expected_lengths, &truth, recipe.lambda)?;
            (total, g.scalar(lw))
        }
        _ => (ce, 0.0),
    };
    Ok((
        loss,
        LossParts {
            loss: g.scalar(loss),
            ce: g.scalar(ce),
            lw,
        },
    ))
}

/// Dense per-parameter gradient buffers, indexed like the parameter store.
pub type GradBuffers = Vec<Vec<f64>>;

fn zero_buffers(store: &ParamStore) -> GradBuffers {
    store.iter().map(|(_, t)| vec![0.0; t.len()]).collect()
}

/// Loss and parameter gradients of one utterance.
pub fn utterance_gradients(
    model: &Model,
    utt: &Utterance,
    labels: Option<&[usize]>,
    recipe: &TrainRecipe,
    feedback: &mut Feedback<'_>,
) -> Result<(LossParts, GradBuffers), TrainingError> {
    let mut g = Graph::new();
    let (loss, parts) = utterance_loss(model, &mut g, utt, labels, recipe, feedback)?;
    let grads = g.backward(loss)?;
    let mut buf = zero_buffers(&model.params);
    for (id, gr) in grads.param_grads() {
        for (a, b) in buf[id.0].iter_mut().zip(gr) {
            *a += b;
        }
    }
    Ok((parts, buf))
}

/// First-order optimiser state.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: Optimizer,
    m: GradBuffers,
    v: GradBuffers,
    t: u64,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, store: &ParamStore) -> Self {
        Self {
            kind,
            m: zero_buffers(store),
            v: zero_buffers(store),
            t: 0,
        }
    }

    /// Clips `grads` to global norm `clip`, adds weight decay and updates.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut GradBuffers, lr: f64, weight_decay: f64, clip: f64) {
        let norm = grads.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        if norm > clip {
            let k = clip / norm;
            grads.iter_mut().flatten().for_each(|x| *x *= k);
        }
        self.t += 1;
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let w = store.get_mut(id).data_mut();
            let gr = &grads[i];
            match self.kind {
                Optimizer::Sgd => {
                    for (x, g) in w.iter_mut().zip(gr) {
                        *x -= lr * (g + weight_decay * *x);
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.t as i32);
                    let c2 = 1.0 - beta2.powi(self.t as i32);
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for k in 0..w.len() {
                        let g = gr[k] + weight_decay * w[k];
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                        v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                        w[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Per-utterance chunk-length labels keyed by utterance id.
pub type ChunkLabels = BTreeMap<String, Vec<usize>>;

/// Number of weights above `threshold`, at least one.
pub fn count_above(row: &[f64], threshold: f64) -> usize {
    row.iter().filter(|&&a| a > threshold).count().max(1)
}

/// Labels for every utterance whose decode by `model` has the reference
/// length. Returns the labels and the number of skipped utterances.
pub fn extract_chunk_labels(
    model: &Model,
    utts: &[Utterance],
    source: LabelSource,
    threshold: f64,
    workers: usize,
) -> Result<(ChunkLabels, usize), TrainingError> {
    let opts = match source {
        LabelSource::Greedy => DecodeOptions::greedy(),
        LabelSource::Beam => DecodeOptions::default(),
        LabelSource::ExternalFile => {
            return Err(TrainingError::Recipe("external chunk labels are read from a file".into()));
        }
    };
    let results: Vec<Option<Vec<usize>>> = with_workers(workers, || {
        utts.par_iter()
            .map(|u| -> Result<Option<Vec<usize>>, TrainingError> {
                let hyp = match decode(model, &u.frames, &opts) {
                    Ok(h) => h,
                    Err(e) => {
                        log::warn!("utterance {}: decode failed: {e}", u.id);
                        return Ok(None);
                    }
                };
                if hyp.tokens.len() != u.targets.len() {
                    return Ok(None);
                }
                Ok(Some(labels_for(model, u, &hyp.tokens, threshold)?))
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    let mut labels = ChunkLabels::new();
    let mut skipped = 0;
    for (u, r) in utts.iter().zip(results) {
        match r {
            Some(l) => {
                labels.insert(u.id.clone(), l);
            }
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("chunk labels: skipped {skipped} of {} utterances", utts.len());
    }
    Ok((labels, skipped))
}

/// Counts attention weights above `threshold` at every step of a
/// teacher-forced pass over `tokens`.
pub fn labels_for(model: &Model, utt: &Utterance, tokens: &[usize], threshold: f64) -> Result<Vec<usize>, TrainingError> {
    let mut g = Graph::inference();
    let out = model.forward_train(&mut g, &utt.frames, tokens, &mut Feedback::teacher_forced())?;
    Ok(out.attention[..tokens.len()]
        .iter()
        .map(|row| count_above(&row.alpha, threshold))
        .collect())
}

pub fn save_chunk_labels(path: &Path, labels: &ChunkLabels) -> std::io::Result<()> {
    let mut s = String::new();
    for (id, l) in labels {
        s.push_str(&serde_json::to_string(&serde_json::json!({ "id": id, "labels": l })).expect("json"));
        s.push('\n');
    }
    crate::io::atomic_write(path, s.as_bytes())
}

pub fn load_chunk_labels(path: &Path) -> Result<ChunkLabels, TrainingError> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Line {
        id: String,
        labels: Vec<usize>,
    }
    let text = std::fs::read_to_string(path)?;
    let mut out = ChunkLabels::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let l: Line = serde_json::from_str(line)
            .map_err(|e| TrainingError::Recipe(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.insert(l.id, l.labels);
    }
    Ok(out)
}

/// Runs `f` on a pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool");
    pool.install(f)
}

/// Edit distance over `ref_len`; see [`crate::harness::cer`].
fn error_counts(refs: &[usize], hyp: &[usize]) -> (usize, usize) {
    (crate::harness::levenshtein(refs, hyp), refs.len())
}

/// Evaluation over a dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Evaluation {
    pub loss: LossParts,
    pub cer: f64,
}

/// Teacher-forced loss and decoding CER over `utts`.
pub fn evaluate(
    model: &Model,
    utts: &[Utterance],
    labels: Option<&ChunkLabels>,
    recipe: &TrainRecipe,
    opts: &DecodeOptions,
    workers: usize,
) -> Result<Evaluation, TrainingError> {
    if utts.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    let per: Vec<(LossParts, (usize, usize))> = with_workers(workers, || {
        utts.par_iter()
            .map(|u| -> Result<_, TrainingError> {
                let mut g = Graph::inference();
                let l = labels.and_then(|m| m.get(&u.id)).map(Vec::as_slice);
                let (_, parts) = utterance_loss(model, &mut g, u, l, recipe, &mut Feedback::teacher_forced())?;
                let hyp = decode(model, &u.frames, opts)?;
                Ok((parts, error_counts(&u.targets, &hyp.tokens)))
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    let n = per.len() as f64;
    let mut ev = Evaluation::default();
    let (mut errs, mut total) = (0, 0);
    for (p, (e, t)) in per {
        ev.loss.loss += p.loss / n;
        ev.loss.ce += p.ce / n;
        ev.loss.lw += p.lw / n;
        errs += e;
        total += t;
    }
    ev.cer = errs as f64 / total as f64;
    Ok(ev)
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub ce: f64,
    pub lw: f64,
    /// Absent for the training split.
    pub cer: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,split,loss,ce,lw,cer";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let cer = self.cer.map(|c| format!("{c:.6}")).unwrap_or_default();
        format!(
            "{},{},{:.8},{:.8},{:.8},{cer}",
            self.epoch, self.split, self.loss, self.ce, self.lw
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// Knobs of a training run that are not part of the recipe.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub seed: u64,
    pub workers: usize,
    /// Per-epoch and final checkpoints go here when set.
    pub checkpoint_dir: Option<PathBuf>,
    /// Metrics CSV, rewritten after every epoch.
    pub metrics_path: Option<PathBuf>,
    /// Decoding used for the dev CER.
    pub dev_decode: Option<DecodeOptions>,
}

/// Trains `model` in place and returns the metrics log.
pub fn train(
    model: &mut Model,
    train_set: &[Utterance],
    dev_set: &[Utterance],
    recipe: &TrainRecipe,
    labels: Option<&ChunkLabels>,
    opts: &TrainOptions,
) -> Result<Vec<MetricsRow>, TrainingError> {
    recipe.validate()?;
    if train_set.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    let dev_decode = opts.dev_decode.unwrap_or_else(DecodeOptions::greedy);
    let mut optim = OptimizerState::new(recipe.optimizer, &model.params);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = rng::stream(opts.seed, streams::SHUFFLE);
    let mut rows = Vec::new();
    for epoch in 1..=recipe.epochs {
        if recipe.shuffle {
            use rand::seq::SliceRandom;
            order.shuffle(&mut shuffle_rng);
        }
        let rate = scheduled_sampling_rate(epoch, recipe);
        let lr = recipe.learning_rate(epoch);
        let mut sums = LossParts::default();
        for batch in order.chunks(recipe.batch_size) {
            let model_ref: &Model = model;
            let results = with_workers(opts.workers, || {
                batch
                    .par_iter()
                    .map(|&i| {
                        let u = &train_set[i];
                        let tag = ((epoch as u64) << 32) | i as u64;
                        let mut sample_rng = rng::stream(opts.seed ^ tag, streams::SAMPLING);
                        let mut noise_rng = rng::stream(opts.seed ^ tag, streams::NOISE);
                        let mut fb = Feedback {
                            sampling_rate: rate,
                            rng: Some(&mut sample_rng),
                            noise: Some(&mut noise_rng),
                        };
                        let l = labels.and_then(|m| m.get(&u.id)).map(Vec::as_slice);
                        utterance_gradients(model_ref, u, l, recipe, &mut fb)
                    })
                    .collect::<Result<Vec<_>, _>>()
            })?;
            let mut acc = zero_buffers(&model.params);
            let k = 1.0 / results.len() as f64;
            for (parts, grads) in results {
                sums.loss += parts.loss;
                sums.ce += parts.ce;
                sums.lw += parts.lw;
                for (a, g) in acc.iter_mut().zip(grads) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += k * y;
                    }
                }
            }
            optim.step(&mut model.params, &mut acc, lr, recipe.weight_decay, recipe.grad_clip);
        }
        let n = train_set.len() as f64;
        rows.push(MetricsRow {
            epoch,
            split: "train",
            loss: sums.loss / n,
            ce: sums.ce / n,
            lw: sums.lw / n,
            cer: None,
        });
        if !dev_set.is_empty() {
            let ev = evaluate(model, dev_set, labels, recipe, &dev_decode, opts.workers)?;
            log::info!("epoch {epoch}: train loss {:.4} dev loss {:.4} dev cer {:.4}", sums.loss / n, ev.loss.loss, ev.cer);
            rows.push(MetricsRow {
                epoch,
                split: "dev",
                loss: ev.loss.loss,
                ce: ev.loss.ce,
                lw: ev.loss.lw,
                cer: Some(ev.cer),
            });
        }
        if let Some(dir) = &opts.checkpoint_dir {
            save_checkpoint(&model.params, &dir.join(format!("epoch-{epoch:03}")))?;
        }
        if let Some(path) = &opts.metrics_path {
            crate::io::atomic_write(path, metrics_csv(&rows).as_bytes())?;
        }
    }
    if let Some(dir) = &opts.checkpoint_dir {
        save_checkpoint(&model.params, &dir.join("final"))?;
    }
    Ok(rows)
}
