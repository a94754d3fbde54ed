#![allow(dead_code)]

use las_core::attention::{Activation, AttentionConfig, AttentionKind, ChunkPredictor, Smoothing};
use las_core::encoder::{Direction, EncoderStack, LayerSpec};
use las_core::model::{Model, ModelConfig};
use las_core::rng::{self, Rng};
use las_core::{ParamStore, Tensor};
use rand::Rng as _;

/// Expected boundary distribution by enumerating every attend/skip outcome
/// of the hard monotonic process. Step `i` scans from the previous
/// boundary (inclusive, position 1 at the start); a scan that runs off the
/// end leaves every later step without a boundary.
pub fn enumerate_alignment(p: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let steps = p.len();
    let u_len = p.first().map_or(0, Vec::len);
    let mut alpha = vec![vec![0.0; u_len]; steps];
    fn walk(p: &[Vec<f64>], i: usize, start: usize, mass: f64, alpha: &mut [Vec<f64>]) {
        if i == p.len() {
            return;
        }
        // Branch on each position in turn: attend here, or skip and move on.
        let mut skip = mass;
        for u in start..p[i].len() {
            let here = skip * p[i][u];
            alpha[i][u] += here;
            walk(p, i + 1, u, here, alpha);
            skip *= 1.0 - p[i][u];
        }
    }
    walk(p, 0, 0, 1.0, &mut alpha);
    alpha
}

/// Chunkwise weights by the literal double sum over windows.
pub fn chunk_double_loop(alpha: &[f64], d: &[f64], w: usize) -> Vec<f64> {
    let n = alpha.len();
    let mut beta = vec![0.0; n];
    for u in 0..n {
        for k in u..(u + w).min(n) {
            let lo = (k + 1).saturating_sub(w);
            let mut denom = 0.0;
            for l in lo..=k {
                denom += d[l].exp();
            }
            beta[u] += alpha[k] * d[u].exp() / denom;
        }
    }
    beta
}

/// Smallest gradient magnitude central differences resolve in f64 at
/// step 1e-5 on an O(1) loss (round-off alone is about 1e-11).
pub const FD_FLOOR: f64 = 1e-6;

/// Relative error of `a` against the finite difference `f`, with the
/// denominator floored at [`FD_FLOOR`].
pub fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(FD_FLOOR)
}

pub fn random_vec(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn random_frames(rng: &mut Rng, t: usize, d: usize) -> Tensor {
    Tensor::new(vec![t, d], random_vec(rng, t * d, -1.0, 1.0)).unwrap()
}

/// Overwrites every parameter with draws from U(-scale, scale), keeping the
/// monotonic gain and offset at their initial values.
pub fn rescale_params(store: &mut ParamStore, rng: &mut Rng, scale: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        if name.ends_with(".g") || name.ends_with(".r") {
            continue;
        }
        for x in store.get_mut(id).data_mut() {
            *x = rng.gen_range(-scale..scale);
        }
    }
}

pub fn all_kinds() -> Vec<(&'static str, AttentionKind)> {
    vec![
        ("gsa", AttentionKind::Gsa),
        ("mocha", AttentionKind::Mocha { chunk: 2 }),
        (
            "amocha_constrained",
            AttentionKind::Amocha {
                predictor: ChunkPredictor::Constrained {
                    w_max: 4,
                    activation: Activation::Tanh,
                },
            },
        ),
        (
            "amocha_unconstrained",
            AttentionKind::Amocha {
                predictor: ChunkPredictor::Unconstrained {
                    activation: Activation::Relu,
                },
            },
        ),
    ]
}

/// Small model: one layer per entry of `layers`, tiny attention and speller.
pub fn tiny_model(
    layers: &[(Direction, usize, bool)],
    kind: AttentionKind,
    smoothing: Smoothing,
    input_dim: usize,
    symbols: usize,
    seed: u64,
) -> Model {
    tiny_model_lc(layers, kind, smoothing, input_dim, symbols, seed, (8, 4))
}

pub fn tiny_model_lc(
    layers: &[(Direction, usize, bool)],
    kind: AttentionKind,
    smoothing: Smoothing,
    input_dim: usize,
    symbols: usize,
    seed: u64,
    lc: (usize, usize),
) -> Model {
    let cfg = ModelConfig {
        input_dim,
        vocab_size: symbols,
        encoder: EncoderStack {
            layers: layers
                .iter()
                .map(|&(direction, hidden_units, pyramid_input)| LayerSpec {
                    direction,
                    hidden_units,
                    pyramid_input,
                })
                .collect(),
            lc_block_len: lc.0,
            lc_right_context: lc.1,
        },
        attention: AttentionConfig {
            kind,
            smoothing,
            energy_dim: 5,
            predictor_dim: 4,
            sigmoid_noise: 0.0,
        },
        speller_hidden: 6,
        embed_dim: 3,
    };
    Model::new(cfg, &mut rng::stream(seed, rng::streams::INIT)).unwrap()
}

/// One LSTM direction run with plain loops over `x` (rows of input),
/// starting from `(h, c)`; gate order input, forget, cell, output.
/// Returns every hidden state and the final `(h, c)`.
pub fn reference_lstm(
    store: &ParamStore,
    prefix: &str,
    x: &[Vec<f64>],
    mut h: Vec<f64>,
    mut c: Vec<f64>,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let get = |n: &str| store.get(store.find(&format!("{prefix}.{n}")).unwrap()).clone();
    let (w_x, w_h, b) = (get("w_x"), get("w_h"), get("b"));
    let hs = h.len();
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    let mut hs_out = Vec::new();
    let mut cs_out = Vec::new();
    for row in x {
        let mut pre = b.data().to_vec();
        for (k, z) in pre.iter_mut().enumerate() {
            for (i, xi) in row.iter().enumerate() {
                *z += xi * w_x.data()[i * 4 * hs + k];
            }
            for (i, hi) in h.iter().enumerate() {
                *z += hi * w_h.data()[i * 4 * hs + k];
            }
        }
        for j in 0..hs {
            let (ig, fg, gg, og) = (sig(pre[j]), sig(pre[hs + j]), pre[2 * hs + j].tanh(), sig(pre[3 * hs + j]));
            c[j] = fg * c[j] + ig * gg;
            h[j] = og * c[j].tanh();
        }
        hs_out.push(h.clone());
        cs_out.push(c.clone());
    }
    (hs_out, cs_out)
}

/// Latency-controlled bidirectional layer `layer` by its definition: blocks
/// of `nc` frames with `nr` frames of right context; the forward direction
/// continues across blocks, the backward direction restarts from zero at
/// each block's right edge. `nc >= T` is a plain BLSTM.
pub fn reference_lc_blstm(store: &ParamStore, layer: usize, x: &[Vec<f64>], nc: usize, nr: usize, hidden: usize) -> Vec<Vec<f64>> {
    let fwd = format!("encoder.{layer}.fwd");
    let bwd = format!("encoder.{layer}.bwd");
    let (f, _) = reference_lstm(store, &fwd, x, vec![0.0; hidden], vec![0.0; hidden]);
    let mut out: Vec<Vec<f64>> = f;
    let t = x.len();
    let mut start = 0;
    while start < t {
        let centre_end = (start + nc).min(t);
        let end = (centre_end + nr).min(t);
        let rev: Vec<Vec<f64>> = x[start..end].iter().rev().cloned().collect();
        let (b, _) = reference_lstm(store, &bwd, &rev, vec![0.0; hidden], vec![0.0; hidden]);
        for s in start..centre_end {
            out[s].extend_from_slice(&b[end - 1 - s]);
        }
        start = centre_end;
    }
    out
}
