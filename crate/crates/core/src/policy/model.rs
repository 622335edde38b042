use serde::{Deserialize, Serialize};

use crate::amb::{AeConfig, MemoryBuffer};
use crate::data::ContextBatch;
use crate::error::{Error, Result};
use crate::nn::{
    rng_from_seed, Block, DropoutRates, Embedding, Graph, LayerNorm, Linear, NnRng, ParamStore, Tensor, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    BaselineDt,
    Reframe,
}

impl PolicyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyMode::BaselineDt => "baseline_dt",
            PolicyMode::Reframe => "reframe",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline_dt" | "baseline" => Ok(PolicyMode::BaselineDt),
            "reframe" => Ok(PolicyMode::Reframe),
            _ => Err(Error::Config(format!("unknown policy mode `{s}` (baseline_dt|reframe)"))),
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            PolicyMode::BaselineDt => 0,
            PolicyMode::Reframe => 1,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(PolicyMode::BaselineDt),
            1 => Some(PolicyMode::Reframe),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// Context length `K` in timesteps; the transformer sees `3K` tokens.
    pub context: usize,
    pub max_ep_len: usize,
    pub dropout: DropoutRates,
    /// Weight of the query alignment loss; 0 disables it.
    pub align_lambda: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            layers: 3,
            heads: 1,
            context: 60,
            max_ep_len: 1000,
            dropout: DropoutRates {
                hidden: 0.2,
                attention: 0.05,
            },
            align_lambda: 0.1,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.layers == 0 || self.context == 0 || self.max_ep_len == 0 {
            return Err(Error::Config("d_model, layers, context and max_ep_len must be >= 1".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        let DropoutRates { hidden, attention } = self.dropout;
        if !(0.0..1.0).contains(&hidden) || !(0.0..1.0).contains(&attention) {
            return Err(Error::Config("dropout rates must lie in [0, 1)".into()));
        }
        if !(self.align_lambda >= 0.0) || !self.align_lambda.is_finite() {
            return Err(Error::Config("align_lambda must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// One retrieval performed for a valid context position.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceEntry {
    /// Flattened `b * K + t` position in the batch.
    pub position: usize,
    pub query: Vec<f64>,
    pub index: usize,
    pub distance_sq: f64,
    pub decoded_action: Vec<f64>,
    pub correction: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RetrievalTrace {
    pub entries: Vec<TraceEntry>,
}

/// Which positions receive an action prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Positions {
    /// All `B x K` positions, padded ones included (the loss masks them).
    All,
    /// The last position of every row, which holds the newest step.
    Last,
}

/// Graph handles produced by one forward pass.
pub struct PolicyOutput {
    /// Predicted actions, one row per selected position.
    pub actions: Var,
    /// Flattened `b * K + t` index of each output row.
    pub positions: Vec<usize>,
    /// Unweighted alignment term `mean_valid ||h* - h'||^2`, reframe only.
    pub align: Option<Var>,
    pub trace: Option<RetrievalTrace>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub action: Var,
    pub align: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct PolicyModel {
    config: PolicyConfig,
    mode: PolicyMode,
    obs_dim: usize,
    act_dim: usize,
    action_low: Vec<f64>,
    action_high: Vec<f64>,
    query_in: usize,
    latent: usize,
    store: ParamStore,
    embed_rtg: Linear,
    embed_obs: Linear,
    embed_act: Linear,
    embed_time: Embedding,
    ln_embed: LayerNorm,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    head: Linear,
    query: Linear,
    correction: Linear,
}

impl PolicyModel {
    /// Backbone weights depend only on `seed`, never on `mode`, so both modes
    /// start from identical transformers. `W, b, W_a, b_a` start at zero.
    pub fn new(
        config: PolicyConfig,
        mode: PolicyMode,
        ae: &AeConfig,
        action_low: Vec<f64>,
        action_high: Vec<f64>,
        obs_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::build(config, mode, (ae.query_width(), ae.latent), action_low, action_high, obs_dim, seed)
    }

    pub(crate) fn build(
        config: PolicyConfig,
        mode: PolicyMode,
        (query_in, latent): (usize, usize),
        action_low: Vec<f64>,
        action_high: Vec<f64>,
        obs_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if query_in == 0 || latent == 0 {
            return Err(Error::Config("query widths must be >= 1".into()));
        }
        let act_dim = action_low.len();
        if act_dim == 0 || action_high.len() != act_dim || obs_dim == 0 {
            return Err(Error::Config("policy needs obs_dim >= 1 and matching action bounds".into()));
        }
        if action_low.iter().zip(&action_high).any(|(l, h)| !(l < h)) {
            return Err(Error::Config("action bounds need lo < hi".into()));
        }
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let embed_rtg = Linear::new(&mut store, "embed_rtg", 1, d, &mut rng)?;
        let embed_obs = Linear::new(&mut store, "embed_obs", obs_dim, d, &mut rng)?;
        let embed_act = Linear::new(&mut store, "embed_act", act_dim, d, &mut rng)?;
        let embed_time = Embedding::new(&mut store, "embed_time", config.max_ep_len, d, &mut rng)?;
        let ln_embed = LayerNorm::new(&mut store, "ln_embed", d)?;
        let blocks = (0..config.layers)
            .map(|i| Block::new(&mut store, &format!("block{i}"), d, config.heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let ln_final = LayerNorm::new(&mut store, "ln_final", d)?;
        let head = Linear::new(&mut store, "head", d, act_dim, &mut rng)?;
        let query = Linear::zeroed(&mut store, "query", query_in, latent)?;
        let correction = Linear::zeroed(&mut store, "correction", act_dim, d)?;
        Ok(Self {
            config,
            mode,
            obs_dim,
            act_dim,
            action_low,
            action_high,
            query_in,
            latent,
            store,
            embed_rtg,
            embed_obs,
            embed_act,
            embed_time,
            ln_embed,
            blocks,
            ln_final,
            head,
            query,
            correction,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn mode(&self) -> PolicyMode {
        self.mode
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn action_bounds(&self) -> (&[f64], &[f64]) {
        (&self.action_low, &self.action_high)
    }

    pub fn query_dims(&self) -> (usize, usize) {
        (self.query_in, self.latent)
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Transformer, embeddings and action head.
    pub fn backbone_params(&self) -> Vec<String> {
        let mut v = self.embed_rtg.param_names();
        v.extend(self.embed_obs.param_names());
        v.extend(self.embed_act.param_names());
        v.push(self.embed_time.table.clone());
        v.extend(self.ln_embed.param_names());
        for b in &self.blocks {
            v.extend(b.param_names());
        }
        v.extend(self.ln_final.param_names());
        v.extend(self.head.param_names());
        v
    }

    /// Query projection `W, b`.
    pub fn query_params(&self) -> Vec<String> {
        self.query.param_names()
    }

    /// Correction projection `W_a, b_a`.
    pub fn correction_params(&self) -> Vec<String> {
        self.correction.param_names()
    }

    /// Every parameter that trains in this mode. With `pin_correction` the
    /// correction stays at its current value.
    pub fn trainable_params(&self, pin_correction: bool) -> Vec<String> {
        let mut v = self.backbone_params();
        if self.mode == PolicyMode::Reframe {
            v.extend(self.query_params());
            if !pin_correction {
                v.extend(self.correction_params());
            }
        }
        v
    }

    /// Starts the query projection at the autoencoder's own map from
    /// `concat(R', o')` into latent space: `W` is the return/observation block
    /// of the bottleneck and `b` folds in the bottleneck bias plus the action
    /// block applied to the mean embedding of the buffer's decoded actions.
    pub fn init_query_from(&mut self, buffer: &MemoryBuffer) -> Result<()> {
        let ae = buffer.model();
        if (ae.config().query_width(), ae.config().latent) != (self.query_in, self.latent) {
            return Err(Error::Config("buffer autoencoder widths disagree with the policy".into()));
        }
        let (w, bias) = ae.bottleneck_affine()?;
        let n = self.latent;
        let qw = Tensor::new(vec![self.query_in, n], w.data()[..self.query_in * n].to_vec())?;
        let act_emb = ae.mean_action_embedding(buffer.decoded_actions())?;
        let mut qb = bias.data().to_vec();
        for (k, e) in act_emb.iter().enumerate() {
            let row = &w.data()[(self.query_in + k) * n..(self.query_in + k + 1) * n];
            for (b, wv) in qb.iter_mut().zip(row) {
                *b += e * wv;
            }
        }
        self.store.get_mut(&self.query.weight)?.value = qw;
        self.store.get_mut(&self.query.bias)?.value = Tensor::new(vec![n], qb)?;
        Ok(())
    }

    fn check_batch(&self, batch: &ContextBatch) -> Result<()> {
        if batch.context != self.config.context {
            return Err(Error::dim("PolicyModel::forward", &[batch.context], &[self.config.context]));
        }
        if batch.obs_dim != self.obs_dim || batch.act_dim != self.act_dim {
            return Err(Error::dim(
                "PolicyModel::forward",
                &[batch.obs_dim, batch.act_dim],
                &[self.obs_dim, self.act_dim],
            ));
        }
        if batch.batch == 0 {
            return Err(Error::Argument("empty batch".into()));
        }
        if let Some(&t) = batch.timesteps.iter().find(|&&t| t >= self.config.max_ep_len) {
            return Err(Error::Argument(format!(
                "timestep {t} beyond max_ep_len {}",
                self.config.max_ep_len
            )));
        }
        Ok(())
    }

    /// Transformer features `a*` at every observation token, `[B*K x D]`.
    pub fn dt_forward(&self, g: &mut Graph, batch: &ContextBatch, mut rng: Option<&mut NnRng>) -> Result<Var> {
        self.check_batch(batch)?;
        let s = &self.store;
        let (b, k) = (batch.batch, batch.context);
        let n = b * k;
        let rtg = g.constant(Tensor::new(vec![n, 1], batch.returns_to_go.clone())?);
        let obs = g.constant(Tensor::new(vec![n, self.obs_dim], batch.observations.clone())?);
        let act = g.constant(Tensor::new(vec![n, self.act_dim], batch.actions.clone())?);
        let time = self.embed_time.forward(g, s, batch.timesteps.clone())?;
        let er = self.embed_rtg.forward(g, s, rtg)?;
        let eo = self.embed_obs.forward(g, s, obs)?;
        let ea = self.embed_act.forward(g, s, act)?;
        let er = g.add(er, time)?;
        let eo = g.add(eo, time)?;
        let ea = g.add(ea, time)?;
        let stacked = g.concat_rows(&[er, eo, ea])?;
        // Interleave to (R_1, o_1, a_1, ..., R_K, o_K, a_K) per batch row.
        let order: Vec<usize> = (0..b)
            .flat_map(|bi| (0..k).flat_map(move |t| (0..3).map(move |c| c * n + bi * k + t)))
            .collect();
        let tokens = g.gather_rows(stacked, order)?;
        let x = self.ln_embed.forward(g, s, tokens)?;
        let mut x = g.dropout(x, self.config.dropout.hidden, rng.as_deref_mut());
        let key_valid: Vec<bool> = batch.mask.iter().flat_map(|&m| [m; 3]).collect();
        let dropout = if rng.is_some() {
            self.config.dropout
        } else {
            DropoutRates {
                hidden: 0.0,
                attention: 0.0,
            }
        };
        for block in &self.blocks {
            x = block.forward(g, s, x, b, 3 * k, &key_valid, dropout, rng.as_deref_mut())?;
        }
        let x = self.ln_final.forward(g, s, x)?;
        let obs_tokens: Vec<usize> = (0..n).map(|i| 3 * i + 1).collect();
        g.gather_rows(x, obs_tokens)
    }

    fn head_forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let z = self.head.forward(g, &self.store, x)?;
        let t = g.tanh(z);
        let unit = self
            .action_low
            .iter()
            .zip(&self.action_high)
            .all(|(l, h)| *l == -1.0 && *h == 1.0);
        if unit {
            return Ok(t);
        }
        let ad = self.act_dim;
        let mut diag = vec![0.0; ad * ad];
        let mut mid = vec![0.0; ad];
        for d in 0..ad {
            diag[d * ad + d] = 0.5 * (self.action_high[d] - self.action_low[d]);
            mid[d] = 0.5 * (self.action_high[d] + self.action_low[d]);
        }
        let w = g.constant(Tensor::new(vec![ad, ad], diag)?);
        let m = g.constant(Tensor::new(vec![1, ad], mid)?);
        let y = g.matmul(t, w)?;
        g.add_bias(y, m)
    }

    /// Predicted actions `â = ActionHead(a* + a'')` (reframe) or
    /// `ActionHead(a*)` (baseline) at the selected positions. Reframe mode
    /// needs `buffer`; baseline mode refuses one.
    pub fn forward(
        &self,
        g: &mut Graph,
        batch: &ContextBatch,
        buffer: Option<&MemoryBuffer>,
        positions: Positions,
        rng: Option<&mut NnRng>,
    ) -> Result<PolicyOutput> {
        let buffer = match (self.mode, buffer) {
            (PolicyMode::BaselineDt, None) => None,
            (PolicyMode::Reframe, Some(buf)) => Some(buf),
            (PolicyMode::BaselineDt, Some(_)) => {
                return Err(Error::Config("baseline_dt mode does not take a memory buffer".into()))
            }
            (PolicyMode::Reframe, None) => return Err(Error::Config("reframe mode needs a memory buffer".into())),
        };
        if let Some(buf) = buffer {
            let ae = buf.model();
            if ae.obs_dim() != self.obs_dim || ae.act_dim() != self.act_dim {
                return Err(Error::Config("buffer autoencoder dims disagree with the policy".into()));
            }
            if (ae.config().query_width(), ae.config().latent) != (self.query_in, self.latent) {
                return Err(Error::Config("buffer autoencoder widths disagree with the policy".into()));
            }
        }
        let astar = self.dt_forward(g, batch, rng)?;
        let k = batch.context;
        let sel: Vec<usize> = match positions {
            Positions::All => (0..batch.batch * k).collect(),
            Positions::Last => (0..batch.batch).map(|b| b * k + k - 1).collect(),
        };
        let astar = match positions {
            Positions::All => astar,
            Positions::Last => g.gather_rows(astar, sel.clone())?,
        };
        let Some(buf) = buffer else {
            let actions = self.head_forward(g, astar)?;
            return Ok(PolicyOutput {
                actions,
                positions: sel,
                align: None,
                trace: None,
            });
        };
        let (fused, align, trace) = self.fuse(g, batch, buf, astar, &sel)?;
        let actions = self.head_forward(g, fused)?;
        Ok(PolicyOutput {
            actions,
            positions: sel,
            align: Some(align),
            trace: Some(trace),
        })
    }

    /// Query, retrieve, decode and correct for every valid selected position,
    /// then add the correction to `a*`. Returns the fused features, the
    /// alignment term and the trace.
    fn fuse(
        &self,
        g: &mut Graph,
        batch: &ContextBatch,
        buf: &MemoryBuffer,
        astar: Var,
        sel: &[usize],
    ) -> Result<(Var, Var, RetrievalTrace)> {
        let ae = buf.model();
        let (od, ad, n) = (self.obs_dim, self.act_dim, sel.len());
        let valid: Vec<usize> = (0..n).filter(|&r| batch.mask[sel[r]]).collect();
        if valid.is_empty() {
            return Err(Error::Argument("no valid positions to fuse".into()));
        }
        let rtg: Vec<f64> = valid.iter().map(|&r| batch.raw_returns_to_go[sel[r]]).collect();
        let obs: Vec<f64> = valid
            .iter()
            .flat_map(|&r| batch.raw_observations[sel[r] * od..(sel[r] + 1) * od].iter().copied())
            .collect();
        let feats = ae.query_features(&rtg, &obs)?;
        let mut qin = vec![0.0; n * self.query_in];
        for (i, &r) in valid.iter().enumerate() {
            qin[r * self.query_in..(r + 1) * self.query_in].copy_from_slice(feats.row(i));
        }
        let qin = g.constant(Tensor::new(vec![n, self.query_in], qin)?);
        let hstar = self.query.forward(g, &self.store, qin)?;

        let mut found = Vec::with_capacity(valid.len());
        let mut decoded = vec![0.0; n * ad];
        let mut target = vec![0.0; n * self.latent];
        let mut weights = vec![0.0; n];
        for &r in &valid {
            let q = g.value(hstar).row(r);
            let hit = buf.retrieve(q)?;
            decoded[r * ad..(r + 1) * ad].copy_from_slice(buf.decoded_action(hit.index));
            target[r * self.latent..(r + 1) * self.latent].copy_from_slice(buf.row(hit.index));
            weights[r] = 1.0;
            found.push((r, q.to_vec(), hit));
        }
        let aprime = g.constant(Tensor::new(vec![n, ad], decoded)?);
        let corr = self.correction.forward(g, &self.store, aprime)?;
        let fused = g.add(astar, corr)?;
        let align = g.weighted_sq_err(hstar, target, weights, valid.len() as f64)?;

        let entries = found
            .into_iter()
            .map(|(r, query, hit)| TraceEntry {
                position: sel[r],
                query,
                index: hit.index,
                distance_sq: hit.distance_sq,
                decoded_action: buf.decoded_action(hit.index).to_vec(),
                correction: g.value(corr).row(r).to_vec(),
            })
            .collect();
        Ok((fused, align, RetrievalTrace { entries }))
    }

    /// Masked MSE of predicted against dataset actions over valid positions,
    /// plus `align_lambda` times the alignment term in reframe mode.
    pub fn loss(
        &self,
        g: &mut Graph,
        batch: &ContextBatch,
        buffer: Option<&MemoryBuffer>,
        rng: Option<&mut NnRng>,
    ) -> Result<(LossParts, PolicyOutput)> {
        let out = self.forward(g, batch, buffer, Positions::All, rng)?;
        let action = policy_loss(g, out.actions, batch)?;
        let total = match out.align {
            Some(al) if self.config.align_lambda > 0.0 => {
                let scaled = g.scale(al, self.config.align_lambda);
                g.add(action, scaled)?
            }
            _ => action,
        };
        Ok((
            LossParts {
                total,
                action,
                align: out.align,
            },
            out,
        ))
    }
}

/// MSE over the valid positions of `batch`; `pred` holds all `B x K` rows.
pub fn policy_loss(g: &mut Graph, pred: Var, batch: &ContextBatch) -> Result<Var> {
    let valid = batch.num_valid();
    if valid == 0 {
        return Err(Error::Argument("batch has no valid positions".into()));
    }
    let weights = batch.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    g.weighted_sq_err(pred, batch.actions.clone(), weights, (valid * batch.act_dim) as f64)
}
