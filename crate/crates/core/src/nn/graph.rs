//! Reverse-mode differentiation over a recorded tape.
//!
//! Every node value is a 2-D `[rows x cols]` tensor. A [`Graph`] is built once
//! per forward pass; [`Graph::backward`] walks the tape in reverse and returns
//! gradients for every parameter that was pulled in with [`Graph::param`].

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use super::params::ParamStore;
use super::tensor::{gemm, Tensor};
use super::NnRng;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Shape information for the fused causal attention op.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    /// `batch * seq` flags; `false` keys are never attended to.
    pub key_valid: Vec<bool>,
}

enum Op {
    Leaf,
    Param(String, Vec<usize>),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    MulMask {
        x: Var,
        mask: Vec<f64>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<f64>,
        drop: Option<Vec<f64>>,
    },
    SqErr {
        pred: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
        divisor: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<String, Var>,
    frozen: bool,
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![rows, cols], data).expect("graph op produced consistent shape")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose parameters are treated as constants. Used for frozen
    /// models and evaluation, where no gradients are wanted.
    pub fn inference() -> Self {
        Self {
            frozen: true,
            ..Self::default()
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A non-differentiable input. Any tensor is viewed as `[rows x cols]`.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let (r, c) = (t.rows(), t.cols());
        self.push(mat(r, c, t.into_data()), Op::Leaf, false)
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let t = store.value(name)?.clone();
        let shape = t.shape().to_vec();
        let (r, c) = (t.rows(), t.cols());
        let t = mat(r, c, t.into_data());
        let v = if self.frozen {
            self.push(t, Op::Leaf, false)
        } else {
            self.push(t, Op::Param(name.to_string(), shape), true)
        };
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k {
            return Err(Error::dim("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(mat(m, n, out), Op::MatMul(a, b), ng))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.len() != xv.cols() {
            return Err(Error::dim("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(xv.cols()) {
            for (o, bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let (r, c) = (xv.rows(), xv.cols());
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(mat(r, c, out), Op::AddBias(x, b), ng))
    }

    /// `x * w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim("add", av.shape(), bv.shape()));
        }
        let out: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let (r, c) = (av.rows(), av.cols());
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(mat(r, c, out), Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let xv = self.value(x);
        let out = xv.data().iter().map(|v| v * s).collect();
        let (r, c) = (xv.rows(), xv.cols());
        let ng = self.ng(x);
        self.push(mat(r, c, out), Op::Scale(x, s), ng)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| f(v)).collect();
        let (r, c) = (xv.rows(), xv.cols());
        let ng = self.ng(x);
        self.push(mat(r, c, out), op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()),
            Op::Gelu(x),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// per-feature affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::dim("layer_norm", xv.shape(), self.value(gamma).shape()));
        }
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = s;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * s;
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out = xhat
            .chunks(c)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((h, g), b)| h * g + b))
            .collect();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            mat(r, c, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Inverted dropout. With `rng == None` or `rate == 0` this is the identity
    /// and consumes no randomness.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: Option<&mut NnRng>) -> Var {
        let Some(rng) = rng else { return x };
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let xv = self.value(x);
        let out = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let (r, c) = (xv.rows(), xv.cols());
        let ng = self.ng(x);
        self.push(mat(r, c, out), Op::MulMask { x, mask }, ng)
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(Error::dim("gather_rows", xv.shape(), &[bad]));
        }
        if idx.is_empty() {
            return Err(Error::Argument("gather_rows with no indices".into()));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            out.extend_from_slice(xv.row(i));
        }
        let n = idx.len();
        let ng = self.ng(x);
        Ok(self.push(mat(n, c, out), Op::GatherRows { x, idx }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut out = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c {
                return Err(Error::dim("concat_rows", &[c], pv.shape()));
            }
            out.extend_from_slice(pv.data());
        }
        let r = out.len() / c;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(mat(r, c, out), Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::dim("concat_cols", av.shape(), bv.shape()));
        }
        let (p, q) = (av.cols(), bv.cols());
        let mut out = Vec::with_capacity(av.rows() * (p + q));
        for i in 0..av.rows() {
            out.extend_from_slice(av.row(i));
            out.extend_from_slice(bv.row(i));
        }
        let r = av.rows();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(mat(r, p + q, out), Op::ConcatCols(a, b), ng))
    }

    /// Multi-head scaled dot-product attention with a strict causal mask and a
    /// key-padding mask. `q`, `k`, `v` are `[batch*seq x width]`, batch-major.
    /// Query rows with no admissible key produce zeros.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        attn_dropout: f64,
        rng: Option<&mut NnRng>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.cols();
        let (b, t, h) = (layout.batch, layout.seq, layout.heads);
        if h == 0 || width % h != 0 {
            return Err(Error::Config(format!(
                "attention width {width} not divisible by {h} heads"
            )));
        }
        if qv.rows() != b * t || kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(Error::dim("causal_attention", qv.shape(), &[b * t, width]));
        }
        if layout.key_valid.len() != b * t {
            return Err(Error::dim("causal_attention", &[layout.key_valid.len()], &[b * t]));
        }
        let dh = width / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; b * h * t * t];
        let mut scores = vec![0.0; t * t];
        for bi in 0..b {
            let base = bi * t * width;
            for hi in 0..h {
                let off = base + hi * dh;
                strided_gemm(
                    t, dh, t,
                    &qv.data()[off..], width, 1,
                    &kv.data()[off..], 1, width,
                    &mut scores, false,
                );
                let p = &mut probs[(bi * h + hi) * t * t..(bi * h + hi + 1) * t * t];
                for i in 0..t {
                    let row = &scores[i * t..i * t + t];
                    let admissible = |j: usize| layout.key_valid[bi * t + j];
                    let mut max = f64::NEG_INFINITY;
                    for j in (0..=i).filter(|&j| admissible(j)) {
                        max = max.max(row[j] * scale);
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut sum = 0.0;
                    for j in (0..=i).filter(|&j| admissible(j)) {
                        let e = (row[j] * scale - max).exp();
                        p[i * t + j] = e;
                        sum += e;
                    }
                    for j in 0..=i {
                        p[i * t + j] /= sum;
                    }
                }
            }
        }
        let drop = match rng {
            Some(rng) if attn_dropout > 0.0 => {
                let keep = 1.0 - attn_dropout;
                Some(
                    (0..probs.len())
                        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect::<Vec<f64>>(),
                )
            }
            _ => None,
        };
        let mut out = vec![0.0; b * t * width];
        let mut pd = vec![0.0; t * t];
        for bi in 0..b {
            let base = bi * t * width;
            for hi in 0..h {
                let pidx = (bi * h + hi) * t * t;
                let p = &probs[pidx..pidx + t * t];
                let pmat: &[f64] = match &drop {
                    Some(m) => {
                        for ((d, a), mm) in pd.iter_mut().zip(p).zip(&m[pidx..pidx + t * t]) {
                            *d = a * mm;
                        }
                        &pd
                    }
                    None => p,
                };
                let off = base + hi * dh;
                strided_gemm_out(
                    t, t, dh,
                    pmat, t, 1,
                    &vv.data()[off..], width, 1,
                    &mut out[off..], width, false,
                );
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            mat(b * t, width, out),
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
                drop,
            },
            ng,
        ))
    }

    /// `sum_r weights[r] * sum_c (pred[r,c] - target[r,c])^2 / divisor`.
    pub fn weighted_sq_err(
        &mut self,
        pred: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
        divisor: f64,
    ) -> Result<Var> {
        let pv = self.value(pred);
        if target.len() != pv.len() {
            return Err(Error::dim("weighted_sq_err", pv.shape(), &[target.len()]));
        }
        if weights.len() != pv.rows() {
            return Err(Error::dim("weighted_sq_err", pv.shape(), &[weights.len()]));
        }
        if divisor <= 0.0 {
            return Err(Error::Argument("loss divisor must be positive".into()));
        }
        let c = pv.cols();
        let mut total = 0.0;
        for (r, w) in weights.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            let mut s = 0.0;
            for j in 0..c {
                let d = pv.data()[r * c + j] - target[r * c + j];
                s += d * d;
            }
            total += w * s;
        }
        let ng = self.ng(pred);
        Ok(self.push(
            mat(1, 1, vec![total / divisor]),
            Op::SqErr {
                pred,
                target,
                weights,
                divisor,
            },
            ng,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every parameter node.
    pub fn backward(&self, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        let Some(node) = self.nodes.get(loss.0) else {
            return Err(Error::State("backward called before any forward pass".into()));
        };
        if matches!(node.op, Op::Leaf | Op::Param(..)) {
            return Err(Error::State(
                "backward requires a loss produced by a recorded forward pass".into(),
            ));
        }
        if node.value.len() != 1 {
            return Err(Error::State(format!(
                "backward requires a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = BTreeMap::new();
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, g, &mut grads, &mut out);
        }
        // parameters that did not receive any gradient still report zeros
        for (name, &v) in &self.param_vars {
            if !self.frozen && !out.contains_key(name) {
                let shape = match &self.nodes[v.0].op {
                    Op::Param(_, shape) => shape.clone(),
                    _ => self.value(v).shape().to_vec(),
                };
                out.insert(name.clone(), Tensor::zeros(&shape));
            }
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        out: &mut BTreeMap<String, Tensor>,
    ) {
        let val = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Param(name, shape) => {
                let t = Tensor::new(shape.clone(), g).expect("param grad shape");
                out.insert(name.clone(), t);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.ng(*a) {
                    let ga = self.grad_slot(grads, *a);
                    gemm(m, n, k, &g, false, bv.data(), true, ga, true);
                }
                if self.ng(*b) {
                    let gb = self.grad_slot(grads, *b);
                    gemm(k, m, n, av.data(), true, &g, false, gb, true);
                }
            }
            Op::AddBias(x, b) => {
                if self.ng(*x) {
                    add_into(self.grad_slot(grads, *x), &g);
                }
                if self.ng(*b) {
                    let c = val.cols();
                    let gb = self.grad_slot(grads, *b);
                    for row in g.chunks(c) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    add_into(self.grad_slot(grads, *a), &g);
                }
                if self.ng(*b) {
                    add_into(self.grad_slot(grads, *b), &g);
                }
            }
            Op::Scale(x, s) => {
                let gx = self.grad_slot(grads, *x);
                for (o, v) in gx.iter_mut().zip(&g) {
                    *o += s * v;
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data().to_vec();
                let gx = self.grad_slot(grads, *x);
                for ((o, v), xi) in gx.iter_mut().zip(&g).zip(&xv) {
                    if *xi > 0.0 {
                        *o += v;
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data().to_vec();
                let gx = self.grad_slot(grads, *x);
                for ((o, v), &xi) in gx.iter_mut().zip(&g).zip(&xv) {
                    let u = GELU_C * (xi + 0.044715 * xi * xi * xi);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * xi * xi);
                    *o += v * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du);
                }
            }
            Op::Tanh(x) => {
                let gx = self.grad_slot(grads, *x);
                for ((o, v), y) in gx.iter_mut().zip(&g).zip(val.data()) {
                    *o += v * (1.0 - y * y);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = val.cols();
                let gam = self.value(*gamma).data().to_vec();
                if self.ng(*gamma) {
                    let gg = self.grad_slot(grads, *gamma);
                    for (row_g, row_h) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += row_g[j] * row_h[j];
                        }
                    }
                }
                if self.ng(*beta) {
                    let gb = self.grad_slot(grads, *beta);
                    for row_g in g.chunks(c) {
                        add_into(gb, row_g);
                    }
                }
                if self.ng(*x) {
                    let gx = self.grad_slot(grads, *x);
                    let mut dxhat = vec![0.0; c];
                    for (i, (row_g, row_h)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..c {
                            dxhat[j] = row_g[j] * gam[j];
                            mean_d += dxhat[j];
                            mean_dh += dxhat[j] * row_h[j];
                        }
                        mean_d /= c as f64;
                        mean_dh /= c as f64;
                        for j in 0..c {
                            gx[i * c + j] += rstd[i] * (dxhat[j] - mean_d - row_h[j] * mean_dh);
                        }
                    }
                }
            }
            Op::MulMask { x, mask } => {
                let gx = self.grad_slot(grads, *x);
                for ((o, v), m) in gx.iter_mut().zip(&g).zip(mask) {
                    *o += v * m;
                }
            }
            Op::GatherRows { x, idx } => {
                let c = val.cols();
                let gx = self.grad_slot(grads, *x);
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut gx[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.ng(p) {
                        add_into(self.grad_slot(grads, p), &g[start..start + n]);
                    }
                    start += n;
                }
            }
            Op::ConcatCols(a, b) => {
                let p = self.value(*a).cols();
                let q = self.value(*b).cols();
                if self.ng(*a) {
                    let ga = self.grad_slot(grads, *a);
                    for (i, row) in g.chunks(p + q).enumerate() {
                        add_into(&mut ga[i * p..(i + 1) * p], &row[..p]);
                    }
                }
                if self.ng(*b) {
                    let gb = self.grad_slot(grads, *b);
                    for (i, row) in g.chunks(p + q).enumerate() {
                        add_into(&mut gb[i * q..(i + 1) * q], &row[p..]);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
                drop,
            } => self.attention_backward(*q, *k, *v, layout, probs, drop.as_deref(), &g, grads),
            Op::SqErr {
                pred,
                target,
                weights,
                divisor,
            } => {
                let pv = self.value(*pred);
                let c = pv.cols();
                let up = g[0];
                let pdata = pv.data().to_vec();
                let gp = self.grad_slot(grads, *pred);
                for (r, w) in weights.iter().enumerate() {
                    if *w == 0.0 {
                        continue;
                    }
                    for j in 0..c {
                        let i = r * c + j;
                        gp[i] += up * 2.0 * w * (pdata[i] - target[i]) / divisor;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        probs: &[f64],
        drop: Option<&[f64]>,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.cols();
        let (b, t, h) = (layout.batch, layout.seq, layout.heads);
        let dh = width / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; b * t * width];
        let mut dk = vec![0.0; b * t * width];
        let mut dvv = vec![0.0; b * t * width];
        let mut pd = vec![0.0; t * t];
        let mut dpd = vec![0.0; t * t];
        for bi in 0..b {
            for hi in 0..h {
                let pidx = (bi * h + hi) * t * t;
                let p = &probs[pidx..pidx + t * t];
                let off = bi * t * width + hi * dh;
                let pmat: &[f64] = match drop {
                    Some(m) => {
                        for ((d, a), mm) in pd.iter_mut().zip(p).zip(&m[pidx..pidx + t * t]) {
                            *d = a * mm;
                        }
                        &pd
                    }
                    None => p,
                };
                // dV += Pd^T dO
                strided_gemm_out(
                    t, t, dh,
                    pmat, 1, t,
                    &g[off..], width, 1,
                    &mut dvv[off..], width, true,
                );
                // dPd = dO V^T
                strided_gemm(
                    t, dh, t,
                    &g[off..], width, 1,
                    &vv.data()[off..], 1, width,
                    &mut dpd, false,
                );
                if let Some(m) = drop {
                    for (d, mm) in dpd.iter_mut().zip(&m[pidx..pidx + t * t]) {
                        *d *= mm;
                    }
                }
                // softmax backward, in place into dpd -> dS (scaled)
                for i in 0..t {
                    let row_p = &p[i * t..i * t + t];
                    let row_d = &mut dpd[i * t..i * t + t];
                    let dot: f64 = (0..=i).map(|j| row_p[j] * row_d[j]).sum();
                    for j in 0..t {
                        row_d[j] = if j <= i { row_p[j] * (row_d[j] - dot) * scale } else { 0.0 };
                    }
                }
                // dQ += dS K ; dK += dS^T Q
                strided_gemm_out(
                    t, t, dh,
                    &dpd, t, 1,
                    &kv.data()[off..], width, 1,
                    &mut dq[off..], width, true,
                );
                strided_gemm_out(
                    t, t, dh,
                    &dpd, 1, t,
                    &qv.data()[off..], width, 1,
                    &mut dk[off..], width, true,
                );
            }
        }
        if self.ng(q) {
            add_into(self.grad_slot(grads, q), &dq);
        }
        if self.ng(k) {
            add_into(self.grad_slot(grads, k), &dk);
        }
        if self.ng(v) {
            add_into(self.grad_slot(grads, v), &dvv);
        }
    }

    #[allow(clippy::mut_from_ref)]
    fn grad_slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut Vec<f64> {
        let n = self.value(v).len();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `c[m x n] = a[m x k] * b[k x n]` with explicit strides on `a` and `b`;
/// `c` is dense `m x n`.
#[allow(clippy::too_many_arguments)]
fn strided_gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    accumulate: bool,
) {
    strided_gemm_out(m, k, n, a, rsa, csa, b, rsb, csb, c, n, accumulate);
}

#[allow(clippy::too_many_arguments)]
fn strided_gemm_out(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    accumulate: bool,
) {
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(last(m, k, rsa, csa) < a.len());
    assert!(last(k, n, rsb, csb) < b.len());
    assert!(last(m, n, rsc, 1) < c.len());
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every addressed element within its slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}
