//! Eager reverse-mode differentiation.
//!
//! Every operation computes its value immediately and records its parents on
//! a flat tape. `backward` walks the tape in reverse and returns gradients for
//! every tracked node. Nodes that do not depend on a tracked leaf are never
//! visited by the backward pass.

use std::collections::HashMap;

use super::{ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Maximum(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MatMul(Var, Var),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    ConcatCols(Var, Var),
    Row(Var, usize),
    SliceRows(Var, usize),
    Slice(Var, usize),
    Reshape(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    L2Normalize(Var),
    FutureMean(Var, usize),
    LstmCell(Var, Var),
    MonotonicAlignment(Var, Option<Var>),
    ChunkSpread(Var, Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Tape of evaluated operations.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    track_params: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (shape[0], 1),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax of `x` written into `out`, with max subtraction.
pub fn softmax_into(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn log_softmax_into(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

/// Window `[lo, k]` (0-based, inclusive) of length at most `w` ending at `k`.
pub fn window_start(k: usize, w: usize) -> usize {
    (k + 1).saturating_sub(w.max(1))
}

/// Division-free expected-alignment row. `prev = None` is the initial
/// condition with all mass placed before the first position.
pub fn monotonic_row(p: &[f64], prev: Option<&[f64]>, q_out: &mut [f64]) -> Vec<f64> {
    let n = p.len();
    let mut alpha = vec![0.0; n];
    let mut q = 0.0;
    for u in 0..n {
        let carry = if u == 0 { 0.0 } else { (1.0 - p[u - 1]) * q };
        let inflow = match prev {
            Some(prev) => prev[u],
            None => {
                if u == 0 {
                    1.0
                } else {
                    0.0
                }
            }
        };
        q = carry + inflow;
        q_out[u] = q;
        alpha[u] = p[u] * q;
    }
    alpha
}

/// Spreads each position's mass `alpha[k]` over its window with softmax
/// weights of `energy`.
pub fn chunk_spread(alpha: &[f64], energy: &[f64], windows: &[usize]) -> Vec<f64> {
    let n = alpha.len();
    let mut beta = vec![0.0; n];
    let mut soft = vec![0.0; n];
    for k in 0..n {
        if alpha[k] == 0.0 {
            continue;
        }
        let lo = window_start(k, windows[k]);
        let s = &mut soft[lo..=k];
        softmax_into(&energy[lo..=k], s);
        for (b, w) in beta[lo..=k].iter_mut().zip(s.iter()) {
            *b += alpha[k] * w;
        }
    }
    beta
}

impl Graph {
    /// Graph whose parameter leaves are tracked for differentiation.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            track_params: true,
        }
    }

    /// Graph for forward evaluation only: parameters enter as constants.
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph node shape is consistent")
    }

    /// Leaf node; tracked when the tensor requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Untracked leaf.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_vec(&mut self, data: Vec<f64>) -> Var {
        self.push(vec![data.len()], data, Op::Leaf, false)
    }

    pub fn zeros(&mut self, n: usize) -> Var {
        self.push(vec![n], vec![0.0; n], Op::Leaf, false)
    }

    /// Parameter leaf, inserted once per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, self.track_params);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, mk: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, mk, tracked))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, mk: Op) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let tracked = self.tracked(&[a]);
        self.push(self.shape(a).to_vec(), value, mk, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise maximum.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    /// Adds a vector to every row of a matrix.
    pub fn add_row(&mut self, m: Var, r: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(m));
        if self.shape(r) != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(m).to_vec(),
                rhs: self.shape(r).to_vec(),
            });
        }
        let rv = self.value(r);
        let mut value = self.value(m).to_vec();
        for i in 0..rows {
            for (x, y) in value[i * cols..(i + 1) * cols].iter_mut().zip(rv) {
                *x += y;
            }
        }
        let tracked = self.tracked(&[m, r]);
        Ok(self.push(self.shape(m).to_vec(), value, Op::AddRow(m, r), tracked))
    }

    fn check_scalar(&self, op: &'static str, x: Var, s: Var) -> Result<()> {
        if self.shape(s) != [1] {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        Ok(())
    }

    /// Multiplies every element by a one-element node.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check_scalar("mul_scalar", x, s)?;
        let k = self.scalar(s);
        let value = self.value(x).iter().map(|v| v * k).collect();
        let tracked = self.tracked(&[x, s]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::MulScalar(x, s), tracked))
    }

    /// Adds a one-element node to every element.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check_scalar("add_scalar", x, s)?;
        let k = self.scalar(s);
        let value = self.value(x).iter().map(|v| v + k).collect();
        let tracked = self.tracked(&[x, s]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::AddScalar(x, s), tracked))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, |v| v * k, Op::Scale(x, k))
    }

    pub fn shift(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, |v| v + k, Op::Shift(x))
    }

    /// Matrix product. Accepts `[m,k]x[k,n]`, `[k]x[k,n]` and `[m,k]x[k]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (m, k, n, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (sa[0], sa[1], sb[1], vec![sa[0], sb[1]]),
            (1, 2) if sa[0] == sb[0] => (1, sa[0], sb[1], vec![sb[1]]),
            (2, 1) if sa[1] == sb[0] => (sa[0], sa[1], 1, vec![sa[0]]),
            _ => return Err(err()),
        };
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        matmul_into(av, bv, m, k, n, &mut out);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out_shape, out, Op::MatMul(a, b), tracked))
    }

    /// Concatenates 1-D nodes.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut value = Vec::new();
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: vec![value.len()],
                    rhs: self.shape(p).to_vec(),
                });
            }
            value.extend_from_slice(self.value(p));
        }
        let tracked = self.tracked(parts);
        Ok(self.push(vec![value.len()], value, Op::Concat(parts.to_vec()), tracked))
    }

    /// Stacks equal-length 1-D nodes into the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(&first) = rows.first() else {
            return Err(TensorError::Invalid {
                op: "stack",
                msg: "no rows".into(),
            });
        };
        let width = self.shape(first).to_vec();
        let mut value = Vec::with_capacity(rows.len() * width[0]);
        for &r in rows {
            if self.shape(r) != width.as_slice() || width.len() != 1 {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    lhs: width,
                    rhs: self.shape(r).to_vec(),
                });
            }
            value.extend_from_slice(self.value(r));
        }
        let tracked = self.tracked(rows);
        Ok(self.push(vec![rows.len(), width[0]], value, Op::Stack(rows.to_vec()), tracked))
    }

    /// Joins two matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, ca, cb) = (sa[0], sa[1], sb[1]);
        let mut value = Vec::with_capacity(m * (ca + cb));
        for i in 0..m {
            value.extend_from_slice(&self.value(a)[i * ca..(i + 1) * ca]);
            value.extend_from_slice(&self.value(b)[i * cb..(i + 1) * cb]);
        }
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(vec![m, ca + cb], value, Op::ConcatCols(a, b), tracked))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || i >= s[0] {
            return Err(TensorError::Invalid {
                op: "row",
                msg: format!("row {i} out of range for shape {s:?}"),
            });
        }
        let c = s[1];
        let value = self.value(x)[i * c..(i + 1) * c].to_vec();
        let tracked = self.tracked(&[x]);
        Ok(self.push(vec![c], value, Op::Row(x, i), tracked))
    }

    /// Rows `[start, end)` of a matrix, or elements of a vector.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if start >= end || end > s[0] {
            return Err(TensorError::Invalid {
                op: "slice_rows",
                msg: format!("range {start}..{end} invalid for shape {s:?}"),
            });
        }
        let (_, c) = rows_cols(&s);
        let value = self.value(x)[start * c..end * c].to_vec();
        let mut shape = s.clone();
        shape[0] = end - start;
        let tracked = self.tracked(&[x]);
        Ok(self.push(shape, value, Op::SliceRows(x, start), tracked))
    }

    /// Elements `[start, end)` of a vector.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 1 || start >= end || end > s[0] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{end} invalid for shape {s:?}"),
            });
        }
        let value = self.value(x)[start..end].to_vec();
        let tracked = self.tracked(&[x]);
        Ok(self.push(vec![end - start], value, Op::Slice(x, start), tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.value(x).to_vec();
        let tracked = self.tracked(&[x]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), tracked))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    /// Clamps to `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    fn rowwise(&mut self, x: Var, f: fn(&[f64], &mut [f64]), mk: Op) -> Var {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().expect("non-empty shape");
        let src = self.value(x);
        let mut value = vec![0.0; src.len()];
        for (o, i) in value.chunks_mut(width).zip(src.chunks(width)) {
            f(i, o);
        }
        let tracked = self.tracked(&[x]);
        self.push(shape, value, mk, tracked)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.rowwise(x, softmax_into, Op::Softmax(x))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        self.rowwise(x, log_softmax_into, Op::LogSoftmax(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).iter().sum();
        let tracked = self.tracked(&[x]);
        self.push(vec![1], vec![v], Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vals = self.value(x);
        let v = vals.iter().sum::<f64>() / vals.len() as f64;
        let tracked = self.tracked(&[x]);
        self.push(vec![1], vec![v], Op::Mean(x), tracked)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).sum();
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(vec![1], vec![v], Op::Dot(a, b), tracked))
    }

    /// `v / ||v||`.
    pub fn l2_normalize(&mut self, v: Var) -> Result<Var> {
        let n = self.value(v).iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(TensorError::Invalid {
                op: "l2_normalize",
                msg: "vector has zero norm".into(),
            });
        }
        let value = self.value(v).iter().map(|x| x / n).collect();
        let tracked = self.tracked(&[v]);
        Ok(self.push(self.shape(v).to_vec(), value, Op::L2Normalize(v), tracked))
    }

    /// Mean over the next `w` rows (current one included) along axis 0,
    /// truncated at the end of the sequence.
    pub fn future_mean(&mut self, x: Var, w: usize) -> Result<Var> {
        if w == 0 {
            return Err(TensorError::Invalid {
                op: "future_mean",
                msg: "window must be >= 1".into(),
            });
        }
        let shape = self.shape(x).to_vec();
        let (rows, cols) = rows_cols(&shape);
        let src = self.value(x);
        let mut value = vec![0.0; src.len()];
        for u in 0..rows {
            let end = (u + w).min(rows);
            let out = &mut value[u * cols..(u + 1) * cols];
            for k in u..end {
                for (o, s) in out.iter_mut().zip(&src[k * cols..(k + 1) * cols]) {
                    *o += s;
                }
            }
            let cnt = (end - u) as f64;
            out.iter_mut().for_each(|o| *o /= cnt);
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(shape, value, Op::FutureMean(x, w), tracked))
    }

    /// Fused LSTM cell. `pre` holds the input/forget/cell/output gate
    /// pre-activations `[4h]`; returns `[h' ; c']`.
    pub fn lstm_cell(&mut self, pre: Var, c: Var) -> Result<Var> {
        let hsz = self.shape(c)[0];
        if self.shape(pre) != [4 * hsz] || self.shape(c).len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "lstm_cell",
                lhs: self.shape(pre).to_vec(),
                rhs: self.shape(c).to_vec(),
            });
        }
        let a = self.value(pre);
        let cv = self.value(c);
        let mut out = vec![0.0; 2 * hsz];
        for j in 0..hsz {
            let i = sigmoid(a[j]);
            let f = sigmoid(a[hsz + j]);
            let g = a[2 * hsz + j].tanh();
            let o = sigmoid(a[3 * hsz + j]);
            let cn = f * cv[j] + i * g;
            out[hsz + j] = cn;
            out[j] = o * cn.tanh();
        }
        let tracked = self.tracked(&[pre, c]);
        Ok(self.push(vec![2 * hsz], out, Op::LstmCell(pre, c), tracked))
    }

    /// Expected alignment row from selection probabilities `p` and the
    /// previous row (`None` for the first output step).
    pub fn monotonic_alignment(&mut self, p: Var, prev: Option<Var>) -> Result<Var> {
        if self.shape(p).len() != 1 {
            return Err(TensorError::Invalid {
                op: "monotonic_alignment",
                msg: format!("expected a vector, got {:?}", self.shape(p)),
            });
        }
        if let Some(prev) = prev {
            self.same_shape("monotonic_alignment", p, prev)?;
        }
        let n = self.shape(p)[0];
        let mut q = vec![0.0; n];
        let alpha = monotonic_row(self.value(p), prev.map(|v| self.value(v)), &mut q);
        let mut deps = vec![p];
        deps.extend(prev);
        let tracked = self.tracked(&deps);
        Ok(self.push(vec![n], alpha, Op::MonotonicAlignment(p, prev), tracked))
    }

    /// Redistributes `alpha[k]` over the window ending at `k` of length
    /// `windows[k]` using softmax weights of `energy` over that window.
    pub fn chunk_spread(&mut self, alpha: Var, energy: Var, windows: Vec<usize>) -> Result<Var> {
        self.same_shape("chunk_spread", alpha, energy)?;
        let n = self.shape(alpha)[0];
        if windows.len() != n || self.shape(alpha).len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "chunk_spread",
                lhs: self.shape(alpha).to_vec(),
                rhs: vec![windows.len()],
            });
        }
        let beta = chunk_spread(self.value(alpha), self.value(energy), &windows);
        let tracked = self.tracked(&[alpha, energy]);
        Ok(self.push(vec![n], beta, Op::ChunkSpread(alpha, energy, windows), tracked))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != [1] {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.propagate(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].tracked {
                return;
            }
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(g);
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| g.iter_mut().zip(gy).for_each(|(x, d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * bv[i];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * av[i];
                    }
                });
            }
            Op::Maximum(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        if av[i] >= bv[i] {
                            g[i] += gy[i];
                        }
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        if av[i] < bv[i] {
                            g[i] += gy[i];
                        }
                    }
                });
            }
            Op::AddRow(m, r) => {
                acc(*m, &mut |g| add_into(g, gy));
                acc(*r, &mut |g| {
                    let c = g.len();
                    for row in gy.chunks(c) {
                        add_into(g, row);
                    }
                });
            }
            Op::MulScalar(x, s) => {
                let k = nodes[s.0].value[0];
                let xv = &nodes[x.0].value;
                acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(a, d)| *a += d * k));
                acc(*s, &mut |g| g[0] += gy.iter().zip(xv).map(|(d, v)| d * v).sum::<f64>());
            }
            Op::AddScalar(x, s) => {
                acc(*x, &mut |g| add_into(g, gy));
                acc(*s, &mut |g| g[0] += gy.iter().sum::<f64>());
            }
            Op::Scale(x, k) => acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(a, d)| *a += d * k)),
            Op::Shift(x) | Op::Reshape(x) => acc(*x, &mut |g| add_into(g, gy)),
            Op::MatMul(a, b) => {
                let sa = &nodes[a.0].shape;
                let sb = &nodes[b.0].shape;
                let (m, k, n) = match (sa.len(), sb.len()) {
                    (2, 2) => (sa[0], sa[1], sb[1]),
                    (1, 2) => (1, sa[0], sb[1]),
                    _ => (sa[0], sa[1], 1),
                };
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                // dA = dC * B^T
                acc(*a, &mut |g| {
                    for i in 0..m {
                        let dc = &gy[i * n..(i + 1) * n];
                        let ga = &mut g[i * k..(i + 1) * k];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[p] += dc.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // dB = A^T * dC
                acc(*b, &mut |g| {
                    for i in 0..m {
                        let dc = &gy[i * n..(i + 1) * n];
                        let arow = &av[i * k..(i + 1) * k];
                        for p in 0..k {
                            let ap = arow[p];
                            if ap == 0.0 {
                                continue;
                            }
                            for (x, d) in g[p * n..(p + 1) * n].iter_mut().zip(dc) {
                                *x += ap * d;
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) | Op::Stack(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    acc(*p, &mut |g| add_into(g, &gy[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = nodes[a.0].shape[1];
                let cb = nodes[b.0].shape[1];
                let w = ca + cb;
                acc(*a, &mut |g| {
                    for (i, gr) in g.chunks_mut(ca).enumerate() {
                        add_into(gr, &gy[i * w..i * w + ca]);
                    }
                });
                acc(*b, &mut |g| {
                    for (i, gr) in g.chunks_mut(cb).enumerate() {
                        add_into(gr, &gy[i * w + ca..(i + 1) * w]);
                    }
                });
            }
            Op::Row(x, i) => {
                let c = gy.len();
                acc(*x, &mut |g| add_into(&mut g[i * c..(i + 1) * c], gy));
            }
            Op::SliceRows(x, start) => {
                let (_, c) = rows_cols(&nodes[x.0].shape);
                acc(*x, &mut |g| add_into(&mut g[start * c..start * c + gy.len()], gy));
            }
            Op::Slice(x, start) => acc(*x, &mut |g| add_into(&mut g[*start..start + gy.len()], gy)),
            Op::Tanh(x) => acc(*x, &mut |g| {
                for i in 0..g.len() {
                    g[i] += gy[i] * (1.0 - y[i] * y[i]);
                }
            }),
            Op::Sigmoid(x) => acc(*x, &mut |g| {
                for i in 0..g.len() {
                    g[i] += gy[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Relu(x) => acc(*x, &mut |g| {
                for i in 0..g.len() {
                    if y[i] > 0.0 {
                        g[i] += gy[i];
                    }
                }
            }),
            Op::Exp(x) => acc(*x, &mut |g| {
                for i in 0..g.len() {
                    g[i] += gy[i] * y[i];
                }
            }),
            Op::Log(x) => {
                let xv = &nodes[x.0].value;
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] / xv[i];
                    }
                })
            }
            Op::Clamp(x, lo, hi) => {
                let xv = &nodes[x.0].value;
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        if xv[i] > *lo && xv[i] < *hi {
                            g[i] += gy[i];
                        }
                    }
                })
            }
            Op::Softmax(x) => {
                let w = *node.shape.last().unwrap();
                acc(*x, &mut |g| {
                    for ((gr, yr), dr) in g.chunks_mut(w).zip(y.chunks(w)).zip(gy.chunks(w)) {
                        let s: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for i in 0..w {
                            gr[i] += yr[i] * (dr[i] - s);
                        }
                    }
                })
            }
            Op::LogSoftmax(x) => {
                let w = *node.shape.last().unwrap();
                acc(*x, &mut |g| {
                    for ((gr, yr), dr) in g.chunks_mut(w).zip(y.chunks(w)).zip(gy.chunks(w)) {
                        let s: f64 = dr.iter().sum();
                        for i in 0..w {
                            gr[i] += dr[i] - yr[i].exp() * s;
                        }
                    }
                })
            }
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|a| *a += gy[0])),
            Op::Mean(x) => acc(*x, &mut |g| {
                let k = gy[0] / g.len() as f64;
                g.iter_mut().for_each(|a| *a += k)
            }),
            Op::Dot(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |g| g.iter_mut().zip(bv).for_each(|(x, v)| *x += gy[0] * v));
                acc(*b, &mut |g| g.iter_mut().zip(av).for_each(|(x, v)| *x += gy[0] * v));
            }
            Op::L2Normalize(v) => {
                let vv = &nodes[v.0].value;
                let n = vv.iter().map(|x| x * x).sum::<f64>().sqrt();
                let yd: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                acc(*v, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += (gy[i] - y[i] * yd) / n;
                    }
                })
            }
            Op::FutureMean(x, w) => {
                let (rows, cols) = rows_cols(&node.shape);
                acc(*x, &mut |g| {
                    for u in 0..rows {
                        let end = (u + w).min(rows);
                        let inv = 1.0 / (end - u) as f64;
                        let d = &gy[u * cols..(u + 1) * cols];
                        for k in u..end {
                            for (a, b) in g[k * cols..(k + 1) * cols].iter_mut().zip(d) {
                                *a += b * inv;
                            }
                        }
                    }
                })
            }
            Op::LstmCell(pre, c) => {
                let a = &nodes[pre.0].value;
                let cv = &nodes[c.0].value;
                let hsz = cv.len();
                let mut dpre = vec![0.0; 4 * hsz];
                let mut dc_prev = vec![0.0; hsz];
                for j in 0..hsz {
                    let i = sigmoid(a[j]);
                    let f = sigmoid(a[hsz + j]);
                    let gg = a[2 * hsz + j].tanh();
                    let o = sigmoid(a[3 * hsz + j]);
                    let tc = y[hsz + j].tanh();
                    let dh = gy[j];
                    let dct = gy[hsz + j] + dh * o * (1.0 - tc * tc);
                    dpre[j] = dct * gg * i * (1.0 - i);
                    dpre[hsz + j] = dct * cv[j] * f * (1.0 - f);
                    dpre[2 * hsz + j] = dct * i * (1.0 - gg * gg);
                    dpre[3 * hsz + j] = dh * tc * o * (1.0 - o);
                    dc_prev[j] = dct * f;
                }
                acc(*pre, &mut |g| add_into(g, &dpre));
                acc(*c, &mut |g| add_into(g, &dc_prev));
            }
            Op::MonotonicAlignment(p, prev) => {
                let pv = &nodes[p.0].value;
                let n = pv.len();
                let mut q = vec![0.0; n];
                monotonic_row(pv, prev.map(|v| nodes[v.0].value.as_slice()), &mut q);
                let mut dp = vec![0.0; n];
                let mut dq = vec![0.0; n];
                let mut carry = 0.0; // gradient flowing into q[u] from q[u+1]
                for u in (0..n).rev() {
                    let total = gy[u] * pv[u] + carry;
                    dq[u] = total;
                    dp[u] += gy[u] * q[u];
                    if u > 0 {
                        dp[u - 1] -= total * q[u - 1];
                        carry = total * (1.0 - pv[u - 1]);
                    }
                }
                acc(*p, &mut |g| add_into(g, &dp));
                if let Some(prev) = prev {
                    acc(*prev, &mut |g| add_into(g, &dq));
                }
            }
            Op::ChunkSpread(alpha, energy, windows) => {
                let av = &nodes[alpha.0].value;
                let ev = &nodes[energy.0].value;
                let n = av.len();
                let mut da = vec![0.0; n];
                let mut de = vec![0.0; n];
                let mut soft = vec![0.0; n];
                for k in 0..n {
                    let lo = window_start(k, windows[k]);
                    let s = &mut soft[lo..=k];
                    softmax_into(&ev[lo..=k], s);
                    let proj: f64 = s.iter().zip(&gy[lo..=k]).map(|(a, b)| a * b).sum();
                    da[k] = proj;
                    for (j, sj) in s.iter().enumerate() {
                        de[lo + j] += av[k] * sj * (gy[lo + j] - proj);
                    }
                }
                acc(*alpha, &mut |g| add_into(g, &da));
                acc(*energy, &mut |g| add_into(g, &de));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    if n == 1 {
        for i in 0..m {
            out[i] = a[i * k..(i + 1) * k].iter().zip(b).map(|(x, y)| x * y).sum();
        }
        return;
    }
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let ap = a[i * k + p];
            if ap == 0.0 {
                continue;
            }
            for (x, y) in o.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *x += ap * y;
            }
        }
    }
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` is unreachable.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Vec<f64> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; graph.value(v).len()])
    }

    /// Gradients of every parameter leaf present in the graph.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].clone().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Adds parameter gradients into the store's grad buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in self.param_grads() {
            store.get_mut(id).accumulate_grad(&g);
        }
    }
}
