//! Listener, attender and speller parameters, plus the training-time
//! forward pass over a target sequence.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{
    window_len, AdditiveEnergy, AttentionConfig, AttentionError, AttentionKind, MonotonicEnergy, PredictorParams,
    Smoothing, P_MAX, P_MIN,
};
use crate::encoder::{uniform, Encoder, EncoderError, EncoderStack, LstmParams, LstmState};
use crate::rng::Rng;
use crate::tensor::{CheckpointError, Graph, ParamId, ParamStore, Tensor, TensorError, Var};

/// Reserved token ids; regular symbols start at [`Vocab::FIRST`].
pub struct Vocab;

impl Vocab {
    pub const SOS: usize = 0;
    pub const EOS: usize = 1;
    pub const UNK: usize = 2;
    pub const FIRST: usize = 3;

    /// Total output size for `symbols` regular tokens.
    pub fn size(symbols: usize) -> usize {
        symbols + Self::FIRST
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    /// Regular symbols, excluding SOS/EOS/UNK.
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default)]
    pub encoder: EncoderStack,
    #[serde(default)]
    pub attention: AttentionConfig,
    #[serde(default = "default_speller_hidden")]
    pub speller_hidden: usize,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
}

fn default_input_dim() -> usize {
    16
}
fn default_vocab() -> usize {
    20
}
fn default_speller_hidden() -> usize {
    512
}
fn default_embed() -> usize {
    64
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: default_input_dim(),
            vocab_size: default_vocab(),
            encoder: EncoderStack::default(),
            attention: AttentionConfig::default(),
            speller_hidden: default_speller_hidden(),
            embed_dim: default_embed(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(usize),
    #[error("invalid model config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct SpellerParams {
    pub embed: ParamId,
    pub lstm: LstmParams,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

/// A complete listener-attender-speller network.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub(crate) encoder: Encoder,
    pub(crate) energy: AdditiveEnergy,
    pub(crate) mono: Option<MonotonicEnergy>,
    pub(crate) predictor: Option<PredictorParams>,
    pub(crate) speller: SpellerParams,
}

/// Per-utterance listener outputs and projections shared by all steps.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub h: Var,
    pub len: usize,
    pub energy_keys: Var,
    pub mono_keys: Option<Var>,
    pub pred_keys: Option<Var>,
}

/// Attention recorded for one output step of the training forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRow {
    /// Boundary distribution (softmax weights for global attention).
    pub alpha: Vec<f64>,
    /// Weights actually used for the context.
    pub beta: Vec<f64>,
    /// Chunk length applied at each position.
    pub chunk_len: Vec<usize>,
}

/// Training forward outputs for one utterance.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Output logits per step; the last step predicts EOS.
    pub logits: Vec<Var>,
    /// Expected predicted chunk length per target token (adaptive chunks only).
    pub expected_lengths: Vec<Var>,
    pub attention: Vec<AttentionRow>,
}

/// Feedback policy for the previous-token input during training.
pub struct Feedback<'a> {
    /// Probability of feeding a model sample instead of the reference.
    pub sampling_rate: f64,
    pub rng: Option<&'a mut Rng>,
    /// Source of selection-energy noise; `None` disables noise.
    pub noise: Option<&'a mut Rng>,
}

impl Feedback<'_> {
    pub fn teacher_forced() -> Self {
        Self {
            sampling_rate: 0.0,
            rng: None,
            noise: None,
        }
    }
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self, ModelError> {
        config.attention.validate()?;
        if config.vocab_size == 0 || config.speller_hidden == 0 || config.embed_dim == 0 || config.input_dim == 0 {
            return Err(ModelError::Config("sizes must be positive".into()));
        }
        let mut params = ParamStore::new();
        let encoder = Encoder::new(config.encoder.clone(), config.input_dim, &mut params, rng)?;
        let enc = encoder.output_dim();
        let dec = config.speller_hidden;
        let dim = config.attention.energy_dim;
        let energy = AdditiveEnergy::init(&mut params, rng, "attn.energy", enc, dec, dim);
        let kind = config.attention.kind;
        let mono = kind
            .is_monotonic()
            .then(|| MonotonicEnergy::init(&mut params, rng, "attn.mono", enc, dec, dim));
        let predictor = matches!(kind, AttentionKind::Amocha { .. })
            .then(|| PredictorParams::init(&mut params, rng, enc, dec, config.attention.predictor_dim));
        let vocab = Vocab::size(config.vocab_size);
        let speller = SpellerParams {
            embed: params.add("speller.embed", uniform(rng, &[vocab, config.embed_dim])),
            lstm: LstmParams::init(&mut params, rng, "speller.lstm", config.embed_dim + enc, dec),
            w_out: params.add("speller.w_out", uniform(rng, &[dec + enc, vocab])),
            b_out: params.add("speller.b_out", Tensor::zeros(&[vocab])),
        };
        Ok(Self {
            config,
            params,
            encoder,
            energy,
            mono,
            predictor,
            speller,
        })
    }

    pub fn vocab(&self) -> usize {
        Vocab::size(self.config.vocab_size)
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn subsampling(&self) -> usize {
        self.encoder.subsampling()
    }

    /// Copies matching parameters from a checkpoint; absent ones stay fresh.
    pub fn init_from(&mut self, entries: &[(String, Tensor)]) -> Result<usize, ModelError> {
        Ok(self.params.load_from(entries)?)
    }

    /// Projections of the listener outputs `h` (`len` rows).
    pub fn encode_rows(&self, g: &mut Graph, h: Var) -> Result<Encoded, ModelError> {
        let store = &self.params;
        let len = g.shape(h)[0];
        let energy_keys = self.energy.keys(g, store, h)?;
        let mono_keys = match &self.mono {
            Some(m) => {
                let feats = match self.config.attention.smoothing {
                    Smoothing::M1 { w } if w > 1 => g.future_mean(h, w)?,
                    _ => h,
                };
                Some(m.keys(g, store, feats)?)
            }
            None => None,
        };
        let pred_keys = match &self.predictor {
            Some(p) => Some(p.keys(g, store, h)?),
            None => None,
        };
        Ok(Encoded {
            h,
            len,
            energy_keys,
            mono_keys,
            pred_keys,
        })
    }

    /// Runs the listener over `frames` `[T, d]`.
    pub fn encode(&self, g: &mut Graph, frames: &Tensor) -> Result<Encoded, ModelError> {
        let x = g.constant(frames);
        let h = self.encoder.listen(g, &self.params, x)?;
        self.encode_rows(g, h)
    }

    /// Speller recurrence: new decoder state from the previous token and context.
    pub fn speller_state(&self, g: &mut Graph, prev_token: usize, prev: LstmState, prev_ctx: Var) -> Result<LstmState, ModelError> {
        if prev_token >= self.vocab() {
            return Err(ModelError::UnknownToken(prev_token));
        }
        let embed = g.param(&self.params, self.speller.embed);
        let e = g.row(embed, prev_token)?;
        let x = g.concat(&[e, prev_ctx])?;
        Ok(crate::encoder::lstm_step(g, &self.params, &self.speller.lstm, x, prev)?)
    }

    /// Output logits from decoder state and context.
    pub fn output_logits(&self, g: &mut Graph, s: Var, ctx: Var) -> Result<Var, ModelError> {
        let w = g.param(&self.params, self.speller.w_out);
        let b = g.param(&self.params, self.speller.b_out);
        let sc = g.concat(&[s, ctx])?;
        let z = g.matmul(sc, w)?;
        Ok(g.add(z, b)?)
    }

    /// Selection probabilities for every encoded position, clipped, with M2
    /// smoothing applied.
    pub(crate) fn selection_probs(
        &self,
        g: &mut Graph,
        enc: &Encoded,
        s: Var,
        noise: Option<&mut Rng>,
    ) -> Result<Var, ModelError> {
        let mono = self.mono.as_ref().expect("monotonic attention");
        let keys = enc.mono_keys.expect("monotonic keys");
        let mut e = mono.energies(g, &self.params, keys, s)?;
        let std = self.config.attention.sigmoid_noise;
        if let (Some(rng), true) = (noise, std > 0.0) {
            let n: Vec<f64> = (0..enc.len)
                .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                .collect();
            let n = g.constant_vec(n);
            e = g.add(e, n)?;
        }
        let p = g.sigmoid(e);
        let p = g.clamp(p, P_MIN, P_MAX);
        Ok(match self.config.attention.smoothing {
            Smoothing::M2 { w } if w > 1 => g.future_mean(p, w)?,
            _ => p,
        })
    }

    /// Real-valued chunk lengths for every position (adaptive chunks only).
    pub(crate) fn chunk_lengths(&self, g: &mut Graph, enc: &Encoded, s: Var, positions: usize) -> Result<Option<Var>, ModelError> {
        let AttentionKind::Amocha { predictor } = self.config.attention.kind else {
            return Ok(None);
        };
        let p = self.predictor.as_ref().expect("predictor params");
        let keys = enc.pred_keys.expect("predictor keys");
        Ok(Some(p.lengths(g, &self.params, keys, s, predictor, positions)?))
    }

    /// Teacher-forced (optionally scheduled-sampled) forward pass over
    /// `targets` (token ids without SOS/EOS), using expected attention for
    /// monotonic kinds.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        frames: &Tensor,
        targets: &[usize],
        feedback: &mut Feedback<'_>,
    ) -> Result<ForwardOutput, ModelError> {
        for &t in targets {
            if t >= self.vocab() {
                return Err(ModelError::UnknownToken(t));
            }
        }
        let enc = self.encode(g, frames)?;
        let enc_dim = self.encoder.output_dim();
        let mut state = LstmState::zeros(g, self.config.speller_hidden);
        let mut ctx = g.zeros(enc_dim);
        let mut prev_token = Vocab::SOS;
        let mut prev_alpha: Option<Var> = None;
        let mut out = ForwardOutput {
            logits: Vec::with_capacity(targets.len() + 1),
            expected_lengths: Vec::new(),
            attention: Vec::with_capacity(targets.len() + 1),
        };
        let kind = self.config.attention.kind;
        for i in 0..=targets.len() {
            state = self.speller_state(g, prev_token, state, ctx)?;
            let s = state.h;
            let d = self.energy.energies(g, &self.params, enc.energy_keys, s)?;
            let row = match kind {
                AttentionKind::Gsa => {
                    let (a, c) = crate::attention::soft_context(g, d, enc.h)?;
                    ctx = c;
                    let a = g.value(a).to_vec();
                    AttentionRow {
                        beta: a.clone(),
                        alpha: a,
                        chunk_len: vec![enc.len; enc.len],
                    }
                }
                AttentionKind::Mocha { .. } | AttentionKind::Amocha { .. } => {
                    let p = self.selection_probs(g, &enc, s, feedback.noise.as_deref_mut())?;
                    let alpha = g.monotonic_alignment(p, prev_alpha)?;
                    prev_alpha = Some(alpha);
                    let windows = match kind {
                        AttentionKind::Mocha { chunk } => vec![chunk; enc.len],
                        _ => {
                            let lens = self.chunk_lengths(g, &enc, s, enc.len)?.expect("adaptive kind");
                            if i < targets.len() {
                                let expect = g.dot(alpha, lens)?;
                                out.expected_lengths.push(expect);
                            }
                            g.value(lens).iter().map(|&w| window_len(w)).collect()
                        }
                    };
                    let beta = g.chunk_spread(alpha, d, windows.clone())?;
                    ctx = g.matmul(beta, enc.h)?;
                    AttentionRow {
                        alpha: g.value(alpha).to_vec(),
                        beta: g.value(beta).to_vec(),
                        chunk_len: windows,
                    }
                }
            };
            out.attention.push(row);
            let logits = self.output_logits(g, s, ctx)?;
            out.logits.push(logits);
            if i < targets.len() {
                prev_token = targets[i];
                if feedback.sampling_rate > 0.0 {
                    if let Some(rng) = feedback.rng.as_deref_mut() {
                        if rng.gen::<f64>() < feedback.sampling_rate {
                            prev_token = sample_token(g.value(logits), rng);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Draws a token from `softmax(logits)`.
fn sample_token(logits: &[f64], rng: &mut Rng) -> usize {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut r = rng.gen::<f64>() * total;
    for (i, x) in w.iter().enumerate() {
        r -= x;
        if r <= 0.0 {
            return i;
        }
    }
    w.len() - 1
}
