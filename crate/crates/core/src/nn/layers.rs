//! Parameterized building blocks. Each layer owns only parameter names; values
//! live in a [`ParamStore`] so a model is a plain (store, layout) pair.

use rand::Rng;

use super::graph::{AttentionLayout, Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use super::NnRng;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layer = Self::names(prefix, in_dim, out_dim);
        store.insert_affine_weight(&layer.weight, in_dim, out_dim, rng)?;
        store.insert(&layer.bias, Tensor::zeros(&[out_dim]), false)?;
        Ok(layer)
    }

    /// All-zero weight and bias.
    pub fn zeroed(store: &mut ParamStore, prefix: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let layer = Self::names(prefix, in_dim, out_dim);
        store.insert(&layer.weight, Tensor::zeros(&[in_dim, out_dim]), true)?;
        store.insert(&layer.bias, Tensor::zeros(&[out_dim]), false)?;
        Ok(layer)
    }

    fn names(prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        let b = g.param(store, &self.bias)?;
        g.affine(x, w, b)
    }

    pub fn param_names(&self) -> Vec<String> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        let ln = Self {
            gamma: format!("{prefix}.gamma"),
            beta: format!("{prefix}.beta"),
        };
        store.insert(&ln.gamma, Tensor::full(&[dim], 1.0), false)?;
        store.insert(&ln.beta, Tensor::zeros(&[dim]), false)?;
        Ok(ln)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, &self.gamma)?;
        let beta = g.param(store, &self.beta)?;
        g.layer_norm(x, gamma, beta)
    }

    pub fn param_names(&self) -> Vec<String> {
        vec![self.gamma.clone(), self.beta.clone()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

/// Stack of affine layers with an activation between consecutive layers and
/// none after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{prefix}.{i}"), w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, activation })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x)?;
            if i + 1 < n {
                x = match self.activation {
                    Activation::Relu => g.relu(x),
                    Activation::Gelu => g.gelu(x),
                };
            }
        }
        Ok(x)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn param_names(&self) -> Vec<String> {
        self.layers.iter().flat_map(Linear::param_names).collect()
    }

    /// Convenience for frozen inference on a `[rows x in]` tensor.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, store, xv)?;
        Ok(g.value(y).clone())
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: String,
    pub rows: usize,
    pub width: usize,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        rows: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        store.insert_embedding(name, rows, width, rng)?;
        Ok(Self {
            table: name.to_string(),
            rows,
            width,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, idx: Vec<usize>) -> Result<Var> {
        let t = g.param(store, &self.table)?;
        g.gather_rows(t, idx)
    }
}

/// Multi-head causal self-attention with input and output projections.
#[derive(Clone, Debug)]
pub struct CausalSelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl CausalSelfAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(crate::Error::Config(format!(
                "width {width} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{prefix}.query"), width, width, rng)?,
            key: Linear::new(store, &format!("{prefix}.key"), width, width, rng)?,
            value: Linear::new(store, &format!("{prefix}.value"), width, width, rng)?,
            out: Linear::new(store, &format!("{prefix}.out"), width, width, rng)?,
            heads,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        batch: usize,
        seq: usize,
        key_valid: Vec<bool>,
        attn_dropout: f64,
        rng: Option<&mut NnRng>,
    ) -> Result<Var> {
        let q = self.query.forward(g, store, x)?;
        let k = self.key.forward(g, store, x)?;
        let v = self.value.forward(g, store, x)?;
        let layout = AttentionLayout {
            batch,
            seq,
            heads: self.heads,
            key_valid,
        };
        let y = g.causal_attention(q, k, v, layout, attn_dropout, rng)?;
        self.out.forward(g, store, y)
    }

    /// Evaluation-mode attention over a single unpadded `[T x D]` sequence.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let seq = x.rows();
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, store, xv, 1, seq, vec![true; seq], 0.0, None)?;
        Ok(g.value(y).clone())
    }

    pub fn param_names(&self) -> Vec<String> {
        [&self.query, &self.key, &self.value, &self.out]
            .iter()
            .flat_map(|l| l.param_names())
            .collect()
    }
}

/// Pre-norm transformer block: attention and a GELU feed-forward, each on a
/// residual branch.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln_attn: LayerNorm,
    pub attn: CausalSelfAttention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutRates {
    pub hidden: f64,
    pub attention: f64,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(store, &format!("{prefix}.ln_attn"), width)?,
            attn: CausalSelfAttention::new(store, &format!("{prefix}.attn"), width, heads, rng)?,
            ln_mlp: LayerNorm::new(store, &format!("{prefix}.ln_mlp"), width)?,
            mlp: Mlp::new(
                store,
                &format!("{prefix}.mlp"),
                &[width, 4 * width, width],
                Activation::Gelu,
                rng,
            )?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        batch: usize,
        seq: usize,
        key_valid: &[bool],
        dropout: DropoutRates,
        mut rng: Option<&mut NnRng>,
    ) -> Result<Var> {
        let h = self.ln_attn.forward(g, store, x)?;
        let h = self.attn.forward(
            g,
            store,
            h,
            batch,
            seq,
            key_valid.to_vec(),
            dropout.attention,
            rng.as_deref_mut(),
        )?;
        let h = g.dropout(h, dropout.hidden, rng.as_deref_mut());
        let x = g.add(x, h)?;
        let h = self.ln_mlp.forward(g, store, x)?;
        let h = self.mlp.forward(g, store, h)?;
        let h = g.dropout(h, dropout.hidden, rng.as_deref_mut());
        g.add(x, h)
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut v = self.ln_attn.param_names();
        v.extend(self.attn.param_names());
        v.extend(self.ln_mlp.param_names());
        v.extend(self.mlp.param_names());
        v
    }
}
