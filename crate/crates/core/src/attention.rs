//! Attenders: global soft attention, monotonic chunkwise attention with a
//! fixed chunk, and adaptive chunk attention whose length comes from a small
//! prediction network.
//!
//! Training uses expectations over the hard monotonic process: the expected
//! boundary distribution `alpha` (a division-free recurrence) and the induced
//! chunkwise weights `beta`. Inference takes hard decisions: the first
//! position at or after the previous boundary whose (optionally smoothed)
//! selection probability exceeds one half.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::uniform;
use crate::rng::Rng;
use crate::tensor::{graph_kernels, Graph, ParamId, ParamStore, Tensor, TensorError, Var};

/// Probability clipping used during training and inference.
pub const P_MIN: f64 = 1e-6;
pub const P_MAX: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChunkPredictor {
    /// `W = Wmax * sigmoid(...)`.
    Constrained { w_max: usize, activation: Activation },
    /// `W = exp(...)`.
    Unconstrained { activation: Activation },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttentionKind {
    Gsa,
    Mocha { chunk: usize },
    Amocha { predictor: ChunkPredictor },
}

impl AttentionKind {
    pub fn is_monotonic(&self) -> bool {
        !matches!(self, AttentionKind::Gsa)
    }
}

/// Boundary-shift compensation by averaging over future positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Smoothing {
    #[default]
    None,
    /// Average listener features before the selection energy.
    M1 { w: usize },
    /// Average selection probabilities.
    M2 { w: usize },
}

impl Smoothing {
    /// Extra listener positions past `u` needed to decide at `u`.
    pub fn lookahead(&self) -> usize {
        match *self {
            Smoothing::None => 0,
            Smoothing::M1 { w } | Smoothing::M2 { w } => w.saturating_sub(1),
        }
    }

    pub fn window(&self) -> usize {
        self.lookahead() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    #[serde(default = "default_kind")]
    pub kind: AttentionKind,
    #[serde(default)]
    pub smoothing: Smoothing,
    /// Hidden size of both energy functions.
    #[serde(default = "default_dim")]
    pub energy_dim: usize,
    /// Hidden size of the chunk-length predictor.
    #[serde(default = "default_dim")]
    pub predictor_dim: usize,
    /// Std of Gaussian noise added to selection energies in training; 0 is off.
    #[serde(default)]
    pub sigmoid_noise: f64,
}

fn default_kind() -> AttentionKind {
    AttentionKind::Gsa
}

fn default_dim() -> usize {
    512
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            kind: default_kind(),
            smoothing: Smoothing::None,
            energy_dim: default_dim(),
            predictor_dim: default_dim(),
            sigmoid_noise: 0.0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AttentionError {
    #[error("invalid attention config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<(), AttentionError> {
        let bad = |m: &str| Err(AttentionError::Config(m.to_string()));
        match self.kind {
            AttentionKind::Mocha { chunk: 0 } => return bad("fixed chunk length must be >= 1"),
            AttentionKind::Amocha {
                predictor: ChunkPredictor::Constrained { w_max: 0, .. },
            } => return bad("w_max must be >= 1"),
            _ => {}
        }
        match self.smoothing {
            Smoothing::M1 { w: 0 } | Smoothing::M2 { w: 0 } => return bad("smoothing window must be >= 1"),
            _ => {}
        }
        if self.energy_dim == 0 || self.predictor_dim == 0 {
            return bad("hidden sizes must be positive");
        }
        if self.sigmoid_noise < 0.0 {
            return bad("sigmoid_noise must be >= 0");
        }
        Ok(())
    }
}

/// Boundary bookkeeping of the hard monotonic process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MonotonicState {
    /// 1-based index of the last attended position; 0 before the first.
    pub last_boundary: usize,
    /// Set once a scan ran off the end; every later step finds no boundary.
    pub exhausted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    Attend(usize),
    EndOfInput,
}

/// `V^T tanh(W_h h + W_s s + b)`.
#[derive(Debug, Clone, Copy)]
pub struct AdditiveEnergy {
    pub w_h: ParamId,
    pub w_s: ParamId,
    pub b: ParamId,
    pub v: ParamId,
}

impl AdditiveEnergy {
    pub fn init(store: &mut ParamStore, rng: &mut Rng, prefix: &str, enc: usize, dec: usize, dim: usize) -> Self {
        Self {
            w_h: store.add(format!("{prefix}.w_h"), uniform(rng, &[enc, dim])),
            w_s: store.add(format!("{prefix}.w_s"), uniform(rng, &[dec, dim])),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[dim])),
            v: store.add(format!("{prefix}.v"), uniform(rng, &[dim])),
        }
    }

    /// `H W_h`, shared by every output step of an utterance.
    pub fn keys(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var, TensorError> {
        let w = g.param(store, self.w_h);
        g.matmul(h, w)
    }

    fn hidden(&self, g: &mut Graph, store: &ParamStore, keys: Var, s: Var) -> Result<Var, TensorError> {
        let w_s = g.param(store, self.w_s);
        let b = g.param(store, self.b);
        let q = g.matmul(s, w_s)?;
        let q = g.add(q, b)?;
        let pre = g.add_row(keys, q)?;
        Ok(g.tanh(pre))
    }

    /// Energies of every key row against decoder state `s`.
    pub fn energies(&self, g: &mut Graph, store: &ParamStore, keys: Var, s: Var) -> Result<Var, TensorError> {
        let hid = self.hidden(g, store, keys, s)?;
        let v = g.param(store, self.v);
        g.matmul(hid, v)
    }
}

/// `g * (v/||v||)^T tanh(W_s s + W_h h + b) + r`.
#[derive(Debug, Clone, Copy)]
pub struct MonotonicEnergy {
    pub inner: AdditiveEnergy,
    pub gain: ParamId,
    pub offset: ParamId,
}

impl MonotonicEnergy {
    /// `g = 1`, `r = -1` at initialisation.
    pub fn init(store: &mut ParamStore, rng: &mut Rng, prefix: &str, enc: usize, dec: usize, dim: usize) -> Self {
        let inner = AdditiveEnergy::init(store, rng, prefix, enc, dec, dim);
        Self {
            inner,
            gain: store.add(format!("{prefix}.g"), Tensor::scalar(1.0)),
            offset: store.add(format!("{prefix}.r"), Tensor::scalar(-1.0)),
        }
    }

    pub fn keys(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var, TensorError> {
        self.inner.keys(g, store, h)
    }

    pub fn energies(&self, g: &mut Graph, store: &ParamStore, keys: Var, s: Var) -> Result<Var, TensorError> {
        let hid = self.inner.hidden(g, store, keys, s)?;
        let v = g.param(store, self.inner.v);
        let unit = g.l2_normalize(v)?;
        let gain = g.param(store, self.gain);
        let dir = g.mul_scalar(unit, gain)?;
        let e = g.matmul(hid, dir)?;
        let r = g.param(store, self.offset);
        g.add_scalar(e, r)
    }
}

/// Chunk-length prediction network `V_p^T F(W_h h + W_s s + b)`.
#[derive(Debug, Clone, Copy)]
pub struct PredictorParams {
    pub w_h: ParamId,
    pub w_s: ParamId,
    pub b: ParamId,
    pub v_p: ParamId,
}

impl PredictorParams {
    pub fn init(store: &mut ParamStore, rng: &mut Rng, enc: usize, dec: usize, dim: usize) -> Self {
        let p = "attn.pred";
        Self {
            w_h: store.add(format!("{p}.w_h"), uniform(rng, &[enc, dim])),
            w_s: store.add(format!("{p}.w_s"), uniform(rng, &[dec, dim])),
            b: store.add(format!("{p}.b"), Tensor::zeros(&[dim])),
            v_p: store.add(format!("{p}.v_p"), uniform(rng, &[dim])),
        }
    }

    pub fn keys(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var, TensorError> {
        let w = g.param(store, self.w_h);
        g.matmul(h, w)
    }

    /// Real-valued chunk length for every key row. `positions` bounds the
    /// unconstrained exponent at `ln(positions) + 1`.
    pub fn lengths(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        keys: Var,
        s: Var,
        predictor: ChunkPredictor,
        positions: usize,
    ) -> Result<Var, TensorError> {
        let w_s = g.param(store, self.w_s);
        let b = g.param(store, self.b);
        let q = g.matmul(s, w_s)?;
        let q = g.add(q, b)?;
        let pre = g.add_row(keys, q)?;
        let act = match predictor {
            ChunkPredictor::Constrained { activation, .. } | ChunkPredictor::Unconstrained { activation } => activation,
        };
        let hid = match act {
            Activation::Relu => g.relu(pre),
            Activation::Tanh => g.tanh(pre),
        };
        let v = g.param(store, self.v_p);
        let z = g.matmul(hid, v)?;
        Ok(match predictor {
            ChunkPredictor::Constrained { w_max, .. } => {
                let sg = g.sigmoid(z);
                g.scale(sg, w_max as f64)
            }
            ChunkPredictor::Unconstrained { .. } => {
                let cap = (positions.max(1) as f64).ln() + 1.0;
                let z = g.clamp(z, f64::NEG_INFINITY, cap);
                g.exp(z)
            }
        })
    }
}

/// Integer window used for a real-valued chunk length: nearest integer,
/// ties up, at least one.
pub fn window_len(w: f64) -> usize {
    let r = (w + 0.5).floor();
    if r.is_finite() && r >= 1.0 {
        r as usize
    } else {
        1
    }
}

/// Softmax weights over `energies`, with their context `sum_u a_u h_u`.
pub fn soft_context(g: &mut Graph, energies: Var, h: Var) -> Result<(Var, Var), TensorError> {
    let a = g.softmax(energies);
    let c = g.matmul(a, h)?;
    Ok((a, c))
}

/// Soft attention restricted to the chunk of length `w` ending at the
/// 1-based boundary `u`. Returns `(weights over the chunk, context)`.
pub fn chunk_context(g: &mut Graph, h: Var, energies: Var, u: usize, w: usize) -> Result<(Var, Var), TensorError> {
    let lo = graph_kernels::window_start(u - 1, w);
    let hs = g.slice_rows(h, lo, u)?;
    let es = g.slice(energies, lo, u)?;
    soft_context(g, es, hs)
}

/// First position at or after the previous boundary whose probability
/// exceeds one half. `probs` holds positions `1..=probs.len()`; when
/// `decidable` is shorter than `probs`, positions past it are unknown and
/// `None` is returned if the scan reaches them.
pub fn first_attended(probs: &[f64], start: MonotonicState, decidable: usize) -> Option<Boundary> {
    if start.exhausted {
        return (decidable >= probs.len()).then_some(Boundary::EndOfInput);
    }
    let from = start.last_boundary.max(1) - 1;
    for u in from..probs.len() {
        if u >= decidable {
            return None;
        }
        if probs[u] > 0.5 {
            return Some(Boundary::Attend(u + 1));
        }
    }
    if decidable >= probs.len() {
        Some(Boundary::EndOfInput)
    } else {
        None
    }
}

/// Hard boundary decision from raw selection energies (no smoothing).
pub fn monotonic_infer_boundary(energies: &[f64], state: &mut MonotonicState) -> Boundary {
    let probs: Vec<f64> = energies.iter().map(|&e| sigmoid(e)).collect();
    let b = first_attended(&probs, *state, probs.len()).expect("all positions decidable");
    match b {
        Boundary::Attend(u) => state.last_boundary = u,
        Boundary::EndOfInput => state.exhausted = true,
    }
    b
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Expected boundary distribution for every output step from selection
/// probabilities `p[i][u]`.
pub fn expected_alignment(p: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(p.len());
    for row in p {
        let clipped: Vec<f64> = row.iter().map(|x| x.clamp(P_MIN, P_MAX)).collect();
        let mut q = vec![0.0; row.len()];
        let alpha = graph_kernels::monotonic_row(&clipped, rows.last().map(Vec::as_slice), &mut q);
        rows.push(alpha);
    }
    rows
}

/// Chunkwise weights induced by boundary distribution `alpha` and chunk
/// energies `d` with a fixed chunk length.
pub fn expected_chunk_attention(alpha: &[f64], d: &[f64], w: usize) -> Vec<f64> {
    graph_kernels::chunk_spread(alpha, d, &vec![w.max(1); alpha.len()])
}

/// Mean of each row with the following `w - 1` rows, truncated at the end.
pub fn smooth_features_m1(h: &[Vec<f64>], w: usize) -> Vec<Vec<f64>> {
    let n = h.len();
    (0..n)
        .map(|u| {
            let end = (u + w.max(1)).min(n);
            let mut acc = vec![0.0; h[u].len()];
            for row in &h[u..end] {
                for (a, b) in acc.iter_mut().zip(row) {
                    *a += b;
                }
            }
            acc.iter().map(|x| x / (end - u) as f64).collect()
        })
        .collect()
}

/// Mean of each probability with the following `w - 1`, truncated.
pub fn smooth_probs_m2(p: &[f64], w: usize) -> Vec<f64> {
    let rows: Vec<Vec<f64>> = p.iter().map(|&x| vec![x]).collect();
    smooth_features_m1(&rows, w).into_iter().map(|r| r[0]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn setup(enc: usize, dec: usize, dim: usize) -> (ParamStore, AdditiveEnergy, MonotonicEnergy, PredictorParams) {
        let mut store = ParamStore::new();
        let mut r = rng::stream(11, 0);
        let a = AdditiveEnergy::init(&mut store, &mut r, "attn.energy", enc, dec, dim);
        let m = MonotonicEnergy::init(&mut store, &mut r, "attn.mono", enc, dec, dim);
        let p = PredictorParams::init(&mut store, &mut r, enc, dec, dim);
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.get_mut(id).data_mut() {
                *v = r.gen_range(-1.0..1.0);
            }
        }
        (store, a, m, p)
    }

    fn mat_vec(m: &Tensor, x: &[f64]) -> Vec<f64> {
        (0..m.cols())
            .map(|j| (0..m.rows()).map(|i| x[i] * m.get2(i, j)).sum())
            .collect()
    }

    fn formula(store: &ParamStore, w_h: ParamId, w_s: ParamId, b: ParamId, s: &[f64], h: &[f64]) -> Vec<f64> {
        let a = mat_vec(store.get(w_h), h);
        let c = mat_vec(store.get(w_s), s);
        let bb = store.get(b).data();
        (0..a.len()).map(|k| a[k] + c[k] + bb[k]).collect()
    }

    #[test]
    fn additive_energy_matches_formula() {
        let (store, a, _, _) = setup(3, 2, 4);
        let s = [0.4, -0.7];
        let h = [0.2, 0.9, -0.5];
        let pre = formula(&store, a.w_h, a.w_s, a.b, &s, &h);
        let v = store.get(a.v).data();
        let expect: f64 = pre.iter().zip(v).map(|(x, w)| x.tanh() * w).sum();
        let mut g = Graph::new();
        let hv = g.constant(&Tensor::new(vec![1, 3], h.to_vec()).unwrap());
        let sv = g.constant_vec(s.to_vec());
        let keys = a.keys(&mut g, &store, hv).unwrap();
        let e = a.energies(&mut g, &store, keys, sv).unwrap();
        assert!(close(g.value(e)[0], expect, 1e-12));
    }

    #[test]
    fn additive_energy_zero_v_and_saturation() {
        let (mut store, a, _, _) = setup(3, 2, 4);
        let mut g = Graph::new();
        let hv = g.constant(&Tensor::new(vec![2, 3], vec![0.3; 6]).unwrap());
        let sv = g.constant_vec(vec![1.0, -1.0]);
        store.get_mut(a.b).data_mut().fill(1e3);
        let keys = a.keys(&mut g, &store, hv).unwrap();
        let e = a.energies(&mut g, &store, keys, sv).unwrap();
        let l1: f64 = store.get(a.v).data().iter().sum();
        assert!(close(g.value(e)[0], l1, 1e-9));
        store.get_mut(a.v).data_mut().fill(0.0);
        let mut g = Graph::new();
        let hv = g.constant(&Tensor::new(vec![2, 3], vec![0.3; 6]).unwrap());
        let sv = g.constant_vec(vec![1.0, -1.0]);
        let keys = a.keys(&mut g, &store, hv).unwrap();
        let e = a.energies(&mut g, &store, keys, sv).unwrap();
        assert_eq!(g.value(e), &[0.0, 0.0]);
    }

    fn mono_energy(store: &ParamStore, m: &MonotonicEnergy, s: &[f64], h: &[f64]) -> f64 {
        let mut g = Graph::new();
        let hv = g.constant(&Tensor::new(vec![1, h.len()], h.to_vec()).unwrap());
        let sv = g.constant_vec(s.to_vec());
        let keys = m.keys(&mut g, store, hv).unwrap();
        let e = m.energies(&mut g, store, keys, sv).unwrap();
        g.value(e)[0]
    }

    #[test]
    fn monotonic_energy_matches_formula_and_is_scale_invariant() {
        let (mut store, _, m, _) = setup(3, 2, 4);
        let s = [0.1, 0.8];
        let h = [-0.3, 0.5, 0.6];
        let pre = formula(&store, m.inner.w_h, m.inner.w_s, m.inner.b, &s, &h);
        let v = store.get(m.inner.v).data().to_vec();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let gain = store.get(m.gain).item();
        let r = store.get(m.offset).item();
        let expect = gain * pre.iter().zip(&v).map(|(x, w)| x.tanh() * w / norm).sum::<f64>() + r;
        let e = mono_energy(&store, &m, &s, &h);
        assert!(close(e, expect, 1e-12));
        store.get_mut(m.inner.v).data_mut().iter_mut().for_each(|x| *x *= 37.5);
        assert!(close(mono_energy(&store, &m, &s, &h), e, 1e-12));
        store.get_mut(m.gain).data_mut()[0] = 0.0;
        assert!(close(mono_energy(&store, &m, &s, &h), r, 1e-15));
    }

    #[test]
    fn monotonic_energy_rejects_zero_direction() {
        let (mut store, _, m, _) = setup(3, 2, 4);
        store.get_mut(m.inner.v).data_mut().fill(0.0);
        let mut g = Graph::new();
        let hv = g.constant(&Tensor::new(vec![1, 3], vec![0.1; 3]).unwrap());
        let sv = g.constant_vec(vec![0.0, 0.0]);
        let keys = m.keys(&mut g, &store, hv).unwrap();
        assert!(m.energies(&mut g, &store, keys, sv).is_err());
    }

    fn predict(store: &ParamStore, p: &PredictorParams, kind: ChunkPredictor, s: &[f64], h: &[f64]) -> f64 {
        let mut g = Graph::new();
        let hv = g.constant(&Tensor::new(vec![1, h.len()], h.to_vec()).unwrap());
        let sv = g.constant_vec(s.to_vec());
        let keys = p.keys(&mut g, store, hv).unwrap();
        let w = p.lengths(&mut g, store, keys, sv, kind, 1000).unwrap();
        g.value(w)[0]
    }

    #[test]
    fn predictors_match_formulas() {
        let (mut store, _, _, p) = setup(3, 2, 4);
        let s = [0.3, -0.2];
        let h = [0.7, 0.1, -0.9];
        let pre = formula(&store, p.w_h, p.w_s, p.b, &s, &h);
        let v = store.get(p.v_p).data().to_vec();
        let z_relu: f64 = pre.iter().zip(&v).map(|(x, w)| x.max(0.0) * w).sum();
        let z_tanh: f64 = pre.iter().zip(&v).map(|(x, w)| x.tanh() * w).sum();
        let c_relu = ChunkPredictor::Constrained { w_max: 40, activation: Activation::Relu };
        let u_tanh = ChunkPredictor::Unconstrained { activation: Activation::Tanh };
        assert!(close(predict(&store, &p, c_relu, &s, &h), 40.0 * sigmoid(z_relu), 1e-12));
        assert!(close(predict(&store, &p, u_tanh, &s, &h), z_tanh.exp(), 1e-12));
        store.get_mut(p.v_p).data_mut().fill(0.0);
        assert!(close(predict(&store, &p, c_relu, &s, &h), 20.0, 1e-15));
        assert!(close(predict(&store, &p, u_tanh, &s, &h), 1.0, 1e-15));
    }

    #[test]
    fn unconstrained_exponent_is_capped() {
        let (mut store, _, _, p) = setup(3, 2, 4);
        store.get_mut(p.b).data_mut().fill(50.0);
        store.get_mut(p.v_p).data_mut().fill(10.0);
        let mut g = Graph::new();
        let hv = g.constant(&Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap());
        let sv = g.constant_vec(vec![0.0, 0.0]);
        let keys = p.keys(&mut g, &store, hv).unwrap();
        let kind = ChunkPredictor::Unconstrained { activation: Activation::Relu };
        let w = p.lengths(&mut g, &store, keys, sv, kind, 8).unwrap();
        assert!(close(g.value(w)[0], 8.0 * std::f64::consts::E, 1e-9));
    }

    #[test]
    fn gsa_context_cases() {
        let mut g = Graph::new();
        let h = g.constant(&Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0]]).unwrap());
        let e = g.constant_vec(vec![0.7, 0.7]);
        let (a, c) = soft_context(&mut g, e, h).unwrap();
        assert_eq!(g.value(a), &[0.5, 0.5]);
        assert_eq!(g.value(c), &[2.0, 4.0]);
        let e = g.constant_vec(vec![0.0, 3f64.ln()]);
        let (a, _) = soft_context(&mut g, e, h).unwrap();
        assert!(close(g.value(a)[0], 0.25, 1e-15) && close(g.value(a)[1], 0.75, 1e-15));
        let h1 = g.constant(&Tensor::from_rows(&[vec![4.0, -1.0]]).unwrap());
        let e1 = g.constant_vec(vec![-12.0]);
        let (a, c) = soft_context(&mut g, e1, h1).unwrap();
        assert_eq!(g.value(a), &[1.0]);
        assert_eq!(g.value(c), &[4.0, -1.0]);
    }

    #[test]
    fn chunk_context_cases() {
        let mut g = Graph::new();
        let h = g.constant(&Tensor::from_rows(&[vec![1.0], vec![2.0], vec![4.0], vec![8.0]]).unwrap());
        let e = g.constant_vec(vec![0.3, -2.0, 1.5, 0.1]);
        let (_, c) = chunk_context(&mut g, h, e, 3, 1).unwrap();
        assert_eq!(g.value(c), &[4.0]);
        let flat = g.constant_vec(vec![0.5; 4]);
        let (_, c) = chunk_context(&mut g, h, flat, 3, 10).unwrap();
        assert!(close(g.value(c)[0], 7.0 / 3.0, 1e-15));
    }

    #[test]
    fn boundary_scan_rules() {
        let mut st = MonotonicState::default();
        assert_eq!(monotonic_infer_boundary(&[-1.0, 2.0, -3.0], &mut st), Boundary::Attend(2));
        assert_eq!(st.last_boundary, 2);
        let mut st = MonotonicState::default();
        assert_eq!(monotonic_infer_boundary(&[-1.0, -2.0, -3.0], &mut st), Boundary::EndOfInput);
        assert_eq!(st.last_boundary, 0);
        assert!(st.exhausted);
        // Once exhausted, later steps never attend again.
        assert_eq!(monotonic_infer_boundary(&[3.0, 2.0, 1.0], &mut st), Boundary::EndOfInput);
        let mut st = MonotonicState {
            last_boundary: 2,
            exhausted: false,
        };
        assert_eq!(monotonic_infer_boundary(&[5.0, -1.0, 4.0], &mut st), Boundary::Attend(3));
        let mut st = MonotonicState {
            last_boundary: 2,
            exhausted: false,
        };
        assert_eq!(monotonic_infer_boundary(&[-5.0, 1.0, 4.0], &mut st), Boundary::Attend(2));
    }

    #[test]
    fn partial_scan_waits_for_undecidable_positions() {
        let probs = [0.1, 0.2, 0.9];
        assert_eq!(first_attended(&probs, MonotonicState::default(), 2), None);
        assert_eq!(first_attended(&probs, MonotonicState::default(), 3), Some(Boundary::Attend(3)));
        assert_eq!(first_attended(&[0.1], MonotonicState::default(), 0), None);
    }

    #[test]
    fn expected_alignment_small_cases() {
        let a = expected_alignment(&[vec![0.5, 0.5]]);
        assert!(close(a[0][0], 0.5, 1e-15) && close(a[0][1], 0.25, 1e-15));
        // saturated probabilities: every output attends the first position
        let a = expected_alignment(&vec![vec![1.0; 4]; 3]);
        for row in &a {
            assert!(close(row[0], 1.0, 1e-5));
            assert!(row[1..].iter().all(|&x| x < 1e-5));
        }
    }

    #[test]
    fn chunk_attention_degenerate_windows() {
        let alpha = [0.1, 0.4, 0.2, 0.2];
        let d = [0.3, -1.0, 2.0, 0.5];
        assert_eq!(expected_chunk_attention(&alpha, &d, 1), alpha.to_vec());
        let beta = expected_chunk_attention(&alpha, &[0.0; 4], 2);
        // interior position 1 collects half of alpha[1] and alpha[2]
        assert!(close(beta[1], (0.4 + 0.2) / 2.0, 1e-15));
    }

    #[test]
    fn smoothing_cases() {
        let h = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        assert_eq!(smooth_features_m1(&h, 1), h);
        assert_eq!(
            smooth_features_m1(&h, 2),
            vec![vec![2.0, 3.0], vec![4.0, 5.0], vec![5.0, 6.0]]
        );
        let same = vec![vec![0.7, -0.1]; 4];
        for (a, b) in smooth_features_m1(&same, 3).iter().flatten().zip(same.iter().flatten()) {
            assert!(close(*a, *b, 1e-15));
        }
        let p = smooth_probs_m2(&[0.2, 0.8, 0.4], 2);
        assert!(close(p[0], 0.5, 1e-15) && close(p[1], 0.6, 1e-15) && close(p[2], 0.4, 1e-15));
        assert_eq!(smooth_probs_m2(&[0.2, 0.8, 0.4], 1), vec![0.2, 0.8, 0.4]);
    }

    #[test]
    fn window_rounding() {
        assert_eq!(window_len(0.2), 1);
        assert_eq!(window_len(2.5), 3);
        assert_eq!(window_len(2.49), 2);
        assert_eq!(window_len(f64::NAN), 1);
    }

    #[test]
    fn config_validation() {
        let mut c = AttentionConfig::default();
        assert!(c.validate().is_ok());
        c.kind = AttentionKind::Mocha { chunk: 0 };
        assert!(c.validate().is_err());
        c.kind = AttentionKind::Mocha { chunk: 10 };
        c.smoothing = Smoothing::M2 { w: 0 };
        assert!(c.validate().is_err());
    }
}
