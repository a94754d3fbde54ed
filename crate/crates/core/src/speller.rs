//! Decoding: single speller steps, greedy and beam search, and streaming
//! decoding driven by incrementally arriving frames.

use serde::{Deserialize, Serialize};

use crate::attention::{first_attended, soft_context, window_len, AttentionKind, Boundary, MonotonicState};
use crate::encoder::{chunk_plan, EncoderError, LstmState};
use crate::model::{Encoded, Model, ModelError, Vocab};
use crate::tensor::{Graph, Tensor, Var};

/// Extra output steps allowed beyond the attended position (monotonic
/// attention) or the number of listener positions (global attention).
pub const MAX_LEN_SLACK: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeOptions {
    #[serde(default = "default_beam")]
    pub beam: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Output-length cap; `None` caps each step at its boundary plus slack
    /// (see [`Session::allows`]).
    #[serde(default)]
    pub max_len: Option<usize>,
}

fn default_beam() -> usize {
    5
}

fn default_temperature() -> f64 {
    1.0
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            beam: default_beam(),
            temperature: default_temperature(),
            max_len: None,
        }
    }
}

impl DecodeOptions {
    pub fn greedy() -> Self {
        Self {
            beam: 1,
            ..Self::default()
        }
    }
}

/// Partial output sequence with its decoder state.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    /// Emitted tokens, starting with SOS.
    pub tokens: Vec<usize>,
    pub log_score: f64,
    pub speller_state: LstmState,
    pub attn_state: MonotonicState,
    pub last_context: Var,
    pub steps: Vec<StepInfo>,
}

impl Hypothesis {
    pub fn last_token(&self) -> usize {
        *self.tokens.last().expect("hypothesis starts with SOS")
    }

    pub fn is_finished(&self) -> bool {
        self.tokens.len() > 1 && self.last_token() == Vocab::EOS
    }

    /// Emitted tokens without SOS and EOS.
    pub fn transcript(&self) -> Vec<usize> {
        let end = if self.is_finished() { self.tokens.len() - 1 } else { self.tokens.len() };
        self.tokens[1..end].to_vec()
    }
}

/// Attention facts of one decoding step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepInfo {
    /// 1-based attended position; for global attention the argmax position.
    /// When the monotonic scan finds no boundary this is the last position
    /// inspected.
    pub boundary_u: usize,
    /// Listener positions contributing to the context.
    pub chunk_len: usize,
    /// True when the monotonic scan ran off the end of the input.
    pub end_of_input: bool,
}

/// Outcome of one attempted step.
#[derive(Debug, Clone)]
pub enum Step {
    /// Not enough listener output has arrived to decide this step.
    NeedMore,
    Ready(StepOutput),
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub speller_state: LstmState,
    pub context: Var,
    pub attn_state: MonotonicState,
    /// Log-probabilities over the vocabulary after temperature.
    pub log_probs: Vec<f64>,
    pub info: StepInfo,
}

/// Decoding state for one utterance over a (possibly growing) listener prefix.
pub struct Session<'m> {
    model: &'m Model,
    g: Graph,
    rows: Vec<Var>,
    ended: bool,
    cache: Option<Encoded>,
}

impl<'m> Session<'m> {
    /// Session with no listener output yet.
    pub fn new(model: &'m Model) -> Self {
        Self {
            model,
            g: Graph::inference(),
            rows: Vec::new(),
            ended: false,
            cache: None,
        }
    }

    /// Session over a whole utterance `[T, d]`.
    pub fn offline(model: &'m Model, frames: &Tensor) -> Result<Self, ModelError> {
        let mut s = Self::new(model);
        let x = s.g.constant(frames);
        let h = model.encoder().listen(&mut s.g, &model.params, x)?;
        let u = s.g.shape(h)[0];
        for i in 0..u {
            let r = s.g.row(h, i)?;
            s.rows.push(r);
        }
        s.ended = true;
        Ok(s)
    }

    pub fn graph(&mut self) -> &mut Graph {
        &mut self.g
    }

    pub fn available(&self) -> usize {
        self.rows.len()
    }

    pub fn has_ended(&self) -> bool {
        self.ended
    }

    /// Appends final listener rows.
    pub fn push_rows(&mut self, rows: &[Var]) {
        if !rows.is_empty() {
            self.rows.extend_from_slice(rows);
            self.cache = None;
        }
    }

    /// Marks the input as complete.
    pub fn finish(&mut self) {
        self.ended = true;
    }

    fn encoded(&mut self) -> Result<Encoded, ModelError> {
        if let Some(e) = self.cache {
            return Ok(e);
        }
        let h = self.g.stack(&self.rows)?;
        let e = self.model.encode_rows(&mut self.g, h)?;
        self.cache = Some(e);
        Ok(e)
    }

    /// Whether a step with attention `info` may follow `emitted` tokens.
    /// Without an explicit cap, monotonic steps are allowed while `emitted`
    /// is below the step's boundary plus [`MAX_LEN_SLACK`], which is known
    /// as soon as the step is; global attention uses the input length.
    pub fn allows(&self, emitted: usize, info: &StepInfo, opts: &DecodeOptions) -> bool {
        let cap = match opts.max_len {
            Some(m) => m,
            None if self.model.config.attention.kind.is_monotonic() => info.boundary_u + MAX_LEN_SLACK,
            None => self.rows.len() + MAX_LEN_SLACK,
        };
        emitted < cap
    }

    /// The hypothesis before the first output step.
    pub fn initial(&mut self) -> Hypothesis {
        let hidden = self.model.config.speller_hidden;
        let enc_dim = self.model.encoder().output_dim();
        Hypothesis {
            tokens: vec![Vocab::SOS],
            log_score: 0.0,
            speller_state: LstmState::zeros(&mut self.g, hidden),
            attn_state: MonotonicState::default(),
            last_context: self.g.zeros(enc_dim),
            steps: Vec::new(),
        }
    }

    /// Decoder recurrence for the next step of `hyp`.
    pub fn next_state(&mut self, hyp: &Hypothesis) -> Result<LstmState, ModelError> {
        self.model
            .speller_state(&mut self.g, hyp.last_token(), hyp.speller_state, hyp.last_context)
    }

    /// Attention and output distribution given the new decoder state.
    pub fn attend(&mut self, hyp: &Hypothesis, state: LstmState, temperature: f64) -> Result<Step, ModelError> {
        let model = self.model;
        let kind = model.config.attention.kind;
        if self.rows.is_empty() {
            if !self.ended {
                return Ok(Step::NeedMore);
            }
            return Err(EncoderError::TooShort {
                frames: 0,
                factor: model.subsampling(),
            }
            .into());
        }
        if kind == AttentionKind::Gsa && !self.ended {
            return Ok(Step::NeedMore);
        }
        let enc = self.encoded()?;
        let g = &mut self.g;
        let s = state.h;
        let d = model.energy.energies(g, &model.params, enc.energy_keys, s)?;
        let (context, attn_state, info) = match kind {
            AttentionKind::Gsa => {
                let (a, c) = soft_context(g, d, enc.h)?;
                let best = argmax(g.value(a));
                let info = StepInfo {
                    boundary_u: best + 1,
                    chunk_len: enc.len,
                    end_of_input: false,
                };
                (c, hyp.attn_state, info)
            }
            AttentionKind::Mocha { .. } | AttentionKind::Amocha { .. } => {
                let p = model.selection_probs(g, &enc, s, None)?;
                let lookahead = model.config.attention.smoothing.lookahead();
                let decidable = if self.ended { enc.len } else { enc.len.saturating_sub(lookahead) };
                let boundary = match first_attended(g.value(p), hyp.attn_state, decidable) {
                    // Running off the rows seen so far is not the end of the input.
                    None | Some(Boundary::EndOfInput) if !self.ended => return Ok(Step::NeedMore),
                    None => unreachable!("every position is decidable once the input has ended"),
                    Some(b) => b,
                };
                match boundary {
                    Boundary::Attend(u) => {
                        let w = match kind {
                            AttentionKind::Mocha { chunk } => chunk,
                            _ => {
                                let lens = model.chunk_lengths(g, &enc, s, enc.len)?.expect("adaptive kind");
                                window_len(g.value(lens)[u - 1])
                            }
                        };
                        let (_, c) = crate::attention::chunk_context(g, enc.h, d, u, w)?;
                        let info = StepInfo {
                            boundary_u: u,
                            chunk_len: w.min(u),
                            end_of_input: false,
                        };
                        (
                            c,
                            MonotonicState {
                                last_boundary: u,
                                exhausted: false,
                            },
                            info,
                        )
                    }
                    Boundary::EndOfInput => {
                        let c = g.zeros(model.encoder().output_dim());
                        let info = StepInfo {
                            boundary_u: enc.len,
                            chunk_len: 0,
                            end_of_input: true,
                        };
                        let state = MonotonicState {
                            exhausted: true,
                            ..hyp.attn_state
                        };
                        (c, state, info)
                    }
                }
            }
        };
        let logits = model.output_logits(g, s, context)?;
        Ok(Step::Ready(StepOutput {
            speller_state: state,
            context,
            attn_state,
            log_probs: log_softmax_t(g.value(logits), temperature),
            info,
        }))
    }

    /// One full decoder step for `hyp`.
    pub fn speller_step(&mut self, hyp: &Hypothesis, temperature: f64) -> Result<Step, ModelError> {
        let state = self.next_state(hyp)?;
        self.attend(hyp, state, temperature)
    }
}

/// Extends `hyp` with `token` using a computed step.
pub fn extend(hyp: &Hypothesis, out: &StepOutput, token: usize) -> Hypothesis {
    let mut tokens = hyp.tokens.clone();
    tokens.push(token);
    let mut steps = hyp.steps.clone();
    steps.push(out.info);
    Hypothesis {
        tokens,
        log_score: hyp.log_score + out.log_probs[token],
        speller_state: out.speller_state,
        attn_state: out.attn_state,
        last_context: out.context,
        steps,
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `log_softmax(logits / temperature)`.
pub fn log_softmax_t(logits: &[f64], temperature: f64) -> Vec<f64> {
    let z: Vec<f64> = logits.iter().map(|x| x / temperature).collect();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

/// Finished decode of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub score: f64,
    /// One entry per emitted token, EOS included when it was emitted.
    pub steps: Vec<StepInfo>,
}

impl From<&Hypothesis> for Decoded {
    fn from(h: &Hypothesis) -> Self {
        Self {
            tokens: h.transcript(),
            score: h.log_score,
            steps: h.steps.clone(),
        }
    }
}

/// Argmax decoding until EOS or the length cap.
pub fn greedy_decode(model: &Model, frames: &Tensor, opts: &DecodeOptions) -> Result<Decoded, ModelError> {
    let mut session = Session::offline(model, frames)?;
    let mut hyp = session.initial();
    while !hyp.is_finished() {
        let Step::Ready(out) = session.speller_step(&hyp, opts.temperature)? else {
            unreachable!("offline sessions have ended input");
        };
        if !session.allows(hyp.tokens.len() - 1, &out.info, opts) {
            break;
        }
        let tok = argmax(&out.log_probs);
        hyp = extend(&hyp, &out, tok);
    }
    Ok(Decoded::from(&hyp))
}

/// Length-synchronous beam search without length normalisation.
pub fn beam_search(model: &Model, frames: &Tensor, opts: &DecodeOptions) -> Result<Decoded, ModelError> {
    let beam = opts.beam.max(1);
    let mut session = Session::offline(model, frames)?;
    let mut open = vec![session.initial()];
    let mut finished: Vec<Hypothesis> = Vec::new();
    while !open.is_empty() {
        let mut expanded = Vec::with_capacity(open.len());
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        let mut capped = Vec::new();
        for (hi, hyp) in open.iter().enumerate() {
            let Step::Ready(out) = session.speller_step(hyp, opts.temperature)? else {
                unreachable!("offline sessions have ended input");
            };
            if session.allows(hyp.tokens.len() - 1, &out.info, opts) {
                for (tok, lp) in out.log_probs.iter().enumerate() {
                    cands.push((hyp.log_score + lp, hi, tok));
                }
            } else {
                capped.push(hi);
            }
            expanded.push(out);
        }
        finished.extend(capped.into_iter().map(|hi| open[hi].clone()));
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(beam);
        for &(_, hi, tok) in cands.iter().take(beam) {
            let h = extend(&open[hi], &expanded[hi], tok);
            if h.is_finished() {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        open = next;
        let best_open = open.iter().map(|h| h.log_score).fold(f64::NEG_INFINITY, f64::max);
        let best_done = finished.iter().map(|h| h.log_score).fold(f64::NEG_INFINITY, f64::max);
        if open.is_empty() || best_done >= best_open {
            break;
        }
    }
    let best = finished
        .iter()
        .chain(open.iter())
        .fold(None::<&Hypothesis>, |acc, h| match acc {
            Some(b) if b.log_score >= h.log_score => Some(b),
            _ => Some(h),
        })
        .expect("beam keeps at least one hypothesis");
    Ok(Decoded::from(best))
}

/// Greedy when `beam == 1`, beam search otherwise.
pub fn decode(model: &Model, frames: &Tensor, opts: &DecodeOptions) -> Result<Decoded, ModelError> {
    if opts.beam <= 1 {
        greedy_decode(model, frames, opts)
    } else {
        beam_search(model, frames, opts)
    }
}

/// One emitted token of a streaming decode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub token: usize,
    pub boundary_u: usize,
    pub chunk_len: usize,
    /// Raw frames read from the source when the token was emitted.
    pub frames_consumed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamOutput {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub trace: Vec<StreamRecord>,
    pub frames_read: usize,
    /// Set when the frame source failed; the trace is partial.
    pub error: Option<String>,
}

/// Frame-by-frame greedy decoding. The listener runs on each block as soon
/// as its frames (plus right context) have arrived, and output steps are
/// taken as soon as the boundary decision is determined by the listener
/// output so far.
pub fn streaming_decode<I, E>(model: &Model, source: I, opts: &DecodeOptions) -> Result<StreamOutput, ModelError>
where
    I: IntoIterator<Item = Result<Vec<f64>, E>>,
    E: std::fmt::Display,
{
    if !model.config.attention.kind.is_monotonic() {
        return Err(EncoderError::NotStreamable.into());
    }
    let (nc, nr) = model.encoder().stack().streaming_geometry()?;
    let dim = model.encoder().input_dim();
    let mut session = Session::new(model);
    let mut carry = model.encoder().initial_carry(session.graph());
    let mut frames: Vec<f64> = Vec::new();
    let mut read = 0usize;
    let mut chunks_done = 0usize;
    let mut hyp = session.initial();
    let mut pending: Option<LstmState> = None;
    let mut capped = false;
    let mut out = StreamOutput {
        tokens: Vec::new(),
        score: 0.0,
        trace: Vec::new(),
        frames_read: 0,
        error: None,
    };

    for item in source {
        let frame = match item {
            Ok(f) => f,
            Err(e) => {
                out.error = Some(e.to_string());
                break;
            }
        };
        if frame.len() != dim {
            out.error = Some(format!("frame {read} has {} values, expected {dim}", frame.len()));
            break;
        }
        frames.extend_from_slice(&frame);
        read += 1;
        let start = chunks_done * nc;
        if read >= start + nc + nr {
            let chunk = Tensor::new(vec![nc + nr, dim], frames[start * dim..(start + nc + nr) * dim].to_vec())?;
            push_chunk(&mut session, model, &chunk, nc, &mut carry)?;
            chunks_done += 1;
            if !capped {
                capped = advance(&mut session, &mut hyp, &mut pending, opts, read, &mut out)?;
            }
        }
    }
    if out.error.is_some() {
        finish_output(&hyp, &mut out, read);
        return Ok(out);
    }
    if read == 0 {
        finish_output(&hyp, &mut out, read);
        return Ok(out);
    }
    for (range, centre) in chunk_plan(read, nc, nr).into_iter().skip(chunks_done) {
        let chunk = Tensor::new(vec![range.len(), dim], frames[range.start * dim..range.end * dim].to_vec())?;
        push_chunk(&mut session, model, &chunk, centre, &mut carry)?;
    }
    session.finish();
    if session.available() == 0 {
        return Err(EncoderError::TooShort {
            frames: read,
            factor: model.subsampling(),
        }
        .into());
    }
    if !capped {
        advance(&mut session, &mut hyp, &mut pending, opts, read, &mut out)?;
    }
    finish_output(&hyp, &mut out, read);
    Ok(out)
}

fn push_chunk(
    session: &mut Session<'_>,
    model: &Model,
    chunk: &Tensor,
    centre: usize,
    carry: &mut [LstmState],
) -> Result<(), ModelError> {
    let g = session.graph();
    let x = g.constant(chunk);
    if let Some(rows) = model.encoder().encode_chunk(g, &model.params, x, centre, carry)? {
        session.push_rows(&rows);
    }
    Ok(())
}

/// Emits greedy tokens while the next step is decidable. Returns true once
/// the length cap has ended decoding.
fn advance(
    session: &mut Session<'_>,
    hyp: &mut Hypothesis,
    pending: &mut Option<LstmState>,
    opts: &DecodeOptions,
    read: usize,
    out: &mut StreamOutput,
) -> Result<bool, ModelError> {
    while !hyp.is_finished() {
        let state = match *pending {
            Some(s) => s,
            None => {
                let s = session.next_state(hyp)?;
                *pending = Some(s);
                s
            }
        };
        match session.attend(hyp, state, opts.temperature)? {
            Step::NeedMore => return Ok(false),
            Step::Ready(step) => {
                if !session.allows(hyp.tokens.len() - 1, &step.info, opts) {
                    return Ok(true);
                }
                let tok = argmax(&step.log_probs);
                *hyp = extend(hyp, &step, tok);
                *pending = None;
                out.trace.push(StreamRecord {
                    token: tok,
                    boundary_u: step.info.boundary_u,
                    chunk_len: step.info.chunk_len,
                    frames_consumed: read,
                });
            }
        }
    }
    Ok(false)
}

fn finish_output(hyp: &Hypothesis, out: &mut StreamOutput, read: usize) {
    out.tokens = hyp.transcript();
    out.score = hyp.log_score;
    out.frames_read = read;
}
