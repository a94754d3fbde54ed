//! Listener: stacked LSTM / BLSTM layers with optional pyramid subsampling
//! and latency-controlled chunking.
//!
//! With latency control, the input is cut into chunks of `Nc` raw frames
//! plus `Nr` frames of right context, and each chunk is pushed through the
//! whole stack at once. The forward LSTM of every layer carries its state
//! from the end of the previous chunk's centre; the backward LSTM starts from
//! zero at the chunk's right edge. Only centre frames are emitted. A single
//! chunk covering the whole input is an ordinary BLSTM pass.

use std::ops::Range;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Uni,
    Bi,
    LatencyControlled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub direction: Direction,
    pub hidden_units: usize,
    #[serde(default)]
    pub pyramid_input: bool,
}

/// Layer list plus latency-control geometry in raw input frames.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderStack {
    #[serde(default = "default_layers")]
    pub layers: Vec<LayerSpec>,
    #[serde(default = "default_block")]
    pub lc_block_len: usize,
    #[serde(default = "default_right_context")]
    pub lc_right_context: usize,
}

fn default_layers() -> Vec<LayerSpec> {
    EncoderStack::default().layers
}

fn default_block() -> usize {
    64
}

fn default_right_context() -> usize {
    32
}

impl Default for EncoderStack {
    /// Four bidirectional layers of 256 units, pyramid on the last two.
    fn default() -> Self {
        let layer = |pyramid_input| LayerSpec {
            direction: Direction::Bi,
            hidden_units: 256,
            pyramid_input,
        };
        Self {
            layers: vec![layer(false), layer(false), layer(true), layer(true)],
            lc_block_len: default_block(),
            lc_right_context: default_right_context(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("encoder stack has no layers")]
    Empty,
    #[error("input of {frames} frames is too short for a subsampling factor of {factor}")]
    TooShort { frames: usize, factor: usize },
    #[error("invalid encoder stack: {0}")]
    Config(String),
    #[error("encoder with bidirectional layers cannot stream")]
    NotStreamable,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl EncoderStack {
    /// Total time reduction of the stack.
    pub fn subsampling(&self) -> usize {
        1 << self.layers.iter().filter(|l| l.pyramid_input).count()
    }

    pub fn is_latency_controlled(&self) -> bool {
        self.layers
            .iter()
            .any(|l| l.direction == Direction::LatencyControlled)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| match l.direction {
            Direction::Uni => l.hidden_units,
            _ => 2 * l.hidden_units,
        })
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.layers.is_empty() {
            return Err(EncoderError::Empty);
        }
        if self.layers.iter().any(|l| l.hidden_units == 0) {
            return Err(EncoderError::Config("hidden_units must be positive".into()));
        }
        if self.is_latency_controlled() {
            if self.layers.iter().any(|l| l.direction == Direction::Bi) {
                return Err(EncoderError::Config(
                    "latency-controlled stacks cannot contain full bidirectional layers".into(),
                ));
            }
            let f = self.subsampling();
            if self.lc_block_len == 0 || !self.lc_block_len.is_multiple_of(f) || !self.lc_right_context.is_multiple_of(f) {
                return Err(EncoderError::Config(format!(
                    "lc_block_len ({}) and lc_right_context ({}) must be multiples of the subsampling factor {f}, block >= 1",
                    self.lc_block_len, self.lc_right_context
                )));
            }
        }
        Ok(())
    }

    /// Chunk geometry `(Nc, Nr)` used for incremental encoding.
    pub fn streaming_geometry(&self) -> Result<(usize, usize), EncoderError> {
        if self.is_latency_controlled() {
            Ok((self.lc_block_len, self.lc_right_context))
        } else if self.layers.iter().all(|l| l.direction == Direction::Uni) {
            Ok((self.subsampling(), 0))
        } else {
            Err(EncoderError::NotStreamable)
        }
    }
}

/// Weights of one LSTM direction; gate order is input, forget, cell, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmParams {
    pub fn init(store: &mut ParamStore, rng: &mut Rng, prefix: &str, input: usize, hidden: usize) -> Self {
        Self {
            w_x: store.add(format!("{prefix}.w_x"), uniform(rng, &[input, 4 * hidden])),
            w_h: store.add(format!("{prefix}.w_h"), uniform(rng, &[hidden, 4 * hidden])),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[4 * hidden])),
            hidden,
        }
    }
}

/// Uniform(-0.05, 0.05) initialisation for weight matrices and vectors.
pub fn uniform(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-0.05..0.05)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// LSTM recurrent state.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(g: &mut Graph, hidden: usize) -> Self {
        Self {
            h: g.zeros(hidden),
            c: g.zeros(hidden),
        }
    }
}

/// One LSTM step from raw input `x`.
pub fn lstm_step(g: &mut Graph, store: &ParamStore, p: &LstmParams, x: Var, state: LstmState) -> Result<LstmState, TensorError> {
    let w_x = g.param(store, p.w_x);
    let proj = g.matmul(x, w_x)?;
    step_from_projection(g, store, p, proj, state, true)
}

fn step_from_projection(
    g: &mut Graph,
    store: &ParamStore,
    p: &LstmParams,
    proj: Var,
    state: LstmState,
    add_bias: bool,
) -> Result<LstmState, TensorError> {
    let w_h = g.param(store, p.w_h);
    let rec = g.matmul(state.h, w_h)?;
    let mut pre = g.add(proj, rec)?;
    if add_bias {
        let b = g.param(store, p.b);
        pre = g.add(pre, b)?;
    }
    let out = g.lstm_cell(pre, state.c)?;
    let h = g.slice(out, 0, p.hidden)?;
    let c = g.slice(out, p.hidden, 2 * p.hidden)?;
    Ok(LstmState { h, c })
}

/// `seq[t] W_x + b` for every row.
fn project(g: &mut Graph, store: &ParamStore, p: &LstmParams, seq: Var) -> Result<Var, TensorError> {
    let w_x = g.param(store, p.w_x);
    let b = g.param(store, p.b);
    let xw = g.matmul(seq, w_x)?;
    g.add_row(xw, b)
}

/// Concatenates consecutive frame pairs; an odd trailing frame is dropped.
pub fn pyramid_reduce(g: &mut Graph, seq: Var) -> Result<Var, EncoderError> {
    let shape = g.shape(seq).to_vec();
    let (t, d) = (shape[0], shape[1]);
    if t < 2 {
        return Err(EncoderError::TooShort { frames: t, factor: 2 });
    }
    let half = t / 2;
    let even = if t % 2 == 1 { g.slice_rows(seq, 0, 2 * half)? } else { seq };
    Ok(g.reshape(even, &[half, 2 * d])?)
}

/// Frame ranges of latency-controlled blocks: block `k` covers
/// `[k*nc, k*nc + nc + nr)` clipped to `t`.
pub fn lc_arrange(t: usize, nc: usize, nr: usize) -> Vec<Range<usize>> {
    assert!(nc >= 1, "block length must be positive");
    (0..t)
        .step_by(nc)
        .map(|start| start..(start + nc + nr).min(t))
        .collect()
}

/// Chunk plan: `(frames, centre_len)` per chunk.
pub(crate) fn chunk_plan(t: usize, nc: usize, nr: usize) -> Vec<(Range<usize>, usize)> {
    lc_arrange(t, nc, nr)
        .into_iter()
        .map(|r| {
            let centre = if r.start + nc >= t { r.len() } else { nc };
            (r, centre)
        })
        .collect()
}

#[derive(Debug, Clone)]
struct LayerParams {
    spec: LayerSpec,
    fwd: LstmParams,
    bwd: Option<LstmParams>,
}

/// Listener parameters.
#[derive(Debug, Clone)]
pub struct Encoder {
    stack: EncoderStack,
    input_dim: usize,
    layers: Vec<LayerParams>,
}

impl Encoder {
    pub fn new(stack: EncoderStack, input_dim: usize, store: &mut ParamStore, rng: &mut Rng) -> Result<Self, EncoderError> {
        stack.validate()?;
        let mut layers = Vec::with_capacity(stack.layers.len());
        let mut dim = input_dim;
        for (i, spec) in stack.layers.iter().enumerate() {
            if spec.pyramid_input {
                dim *= 2;
            }
            let fwd = LstmParams::init(store, rng, &format!("encoder.{i}.fwd"), dim, spec.hidden_units);
            let bwd = (spec.direction != Direction::Uni)
                .then(|| LstmParams::init(store, rng, &format!("encoder.{i}.bwd"), dim, spec.hidden_units));
            dim = if bwd.is_some() { 2 * spec.hidden_units } else { spec.hidden_units };
            layers.push(LayerParams {
                spec: spec.clone(),
                fwd,
                bwd,
            });
        }
        Ok(Self {
            stack,
            input_dim,
            layers,
        })
    }

    pub fn stack(&self) -> &EncoderStack {
        &self.stack
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.stack.output_dim()
    }

    pub fn subsampling(&self) -> usize {
        self.stack.subsampling()
    }

    /// Forward LSTM states at the start of the first chunk.
    pub fn initial_carry(&self, g: &mut Graph) -> Vec<LstmState> {
        self.layers
            .iter()
            .map(|l| LstmState::zeros(g, l.fwd.hidden))
            .collect()
    }

    /// Pushes one chunk `[n, d_in]` through every layer. `centre` raw frames
    /// are emitted; the rest is right context. Returns the top-layer centre
    /// rows, or `None` when subsampling leaves no centre frame.
    pub fn encode_chunk(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        chunk: Var,
        centre: usize,
        carry: &mut [LstmState],
    ) -> Result<Option<Vec<Var>>, EncoderError> {
        let mut x = chunk;
        let mut centre = centre;
        let mut rows_out = Vec::new();
        for (layer, state) in self.layers.iter().zip(carry.iter_mut()) {
            if layer.spec.pyramid_input {
                let n = g.shape(x)[0];
                if n < 2 {
                    return Ok(None);
                }
                x = pyramid_reduce(g, x)?;
                centre /= 2;
            }
            if centre == 0 {
                return Ok(None);
            }
            rows_out = layer_chunk(g, store, layer, x, centre, state)?;
            x = g.stack(&rows_out)?;
        }
        rows_out.truncate(centre);
        Ok(Some(rows_out))
    }

    /// Encodes a full utterance `x: [T, d_in]` into `[U, d_enc]`.
    pub fn listen(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, EncoderError> {
        let t = g.shape(x)[0];
        let factor = self.subsampling();
        if t < factor || t == 0 {
            return Err(EncoderError::TooShort { frames: t, factor });
        }
        let plan = if self.stack.is_latency_controlled() {
            chunk_plan(t, self.stack.lc_block_len, self.stack.lc_right_context)
        } else {
            vec![(0..t, t)]
        };
        let mut carry = self.initial_carry(g);
        let mut rows = Vec::new();
        for (range, centre) in plan {
            let chunk = if range.len() == t {
                x
            } else {
                g.slice_rows(x, range.start, range.end)?
            };
            if let Some(out) = self.encode_chunk(g, store, chunk, centre, &mut carry)? {
                rows.extend(out);
            }
        }
        if rows.is_empty() {
            return Err(EncoderError::TooShort { frames: t, factor });
        }
        Ok(g.stack(&rows)?)
    }

    /// Single bidirectional layer `index` over a whole sequence.
    pub fn blstm_layer(&self, g: &mut Graph, store: &ParamStore, index: usize, x: Var) -> Result<Var, EncoderError> {
        let t = g.shape(x)[0];
        self.lc_blstm_layer(g, store, index, x, t, 0)
    }

    /// Single layer `index` with latency-controlled blocks, ignoring the
    /// layer's pyramid flag.
    pub fn lc_blstm_layer(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        index: usize,
        x: Var,
        nc: usize,
        nr: usize,
    ) -> Result<Var, EncoderError> {
        let layer = &self.layers[index];
        let t = g.shape(x)[0];
        let mut state = LstmState::zeros(g, layer.fwd.hidden);
        let mut rows = Vec::new();
        for (range, centre) in chunk_plan(t, nc.max(1), nr) {
            let chunk = if range.len() == t { x } else { g.slice_rows(x, range.start, range.end)? };
            let out = layer_chunk(g, store, layer, chunk, centre, &mut state)?;
            rows.extend_from_slice(&out[..centre]);
        }
        Ok(g.stack(&rows)?)
    }
}

/// Runs one layer over a chunk and returns every output row (centre and
/// right context). `carry` is advanced to the state after the centre.
fn layer_chunk(
    g: &mut Graph,
    store: &ParamStore,
    layer: &LayerParams,
    x: Var,
    centre: usize,
    carry: &mut LstmState,
) -> Result<Vec<Var>, TensorError> {
    let n = g.shape(x)[0];
    let proj = project(g, store, &layer.fwd, x)?;
    let mut fwd = Vec::with_capacity(n);
    let mut state = *carry;
    for t in 0..n {
        let row = g.row(proj, t)?;
        state = step_from_projection(g, store, &layer.fwd, row, state, false)?;
        fwd.push(state.h);
        if t + 1 == centre {
            *carry = state;
        }
    }
    let Some(bwd_params) = &layer.bwd else {
        return Ok(fwd);
    };
    let proj = project(g, store, bwd_params, x)?;
    let mut bwd = vec![fwd[0]; n];
    let mut state = LstmState::zeros(g, bwd_params.hidden);
    for t in (0..n).rev() {
        let row = g.row(proj, t)?;
        state = step_from_projection(g, store, bwd_params, row, state, false)?;
        bwd[t] = state.h;
    }
    fwd.into_iter()
        .zip(bwd)
        .map(|(f, b)| g.concat(&[f, b]))
        .collect()
}
