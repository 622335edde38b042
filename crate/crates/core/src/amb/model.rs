use crate::binio::{Reader, Writer};
use crate::data::Trajectory;
use crate::error::{Error, Result};
use crate::nn::{rng_from_seed, Activation, Graph, Linear, Mlp, ParamStore, Tensor, Var};

/// Widths of the autoencoder. `latent` must be smaller than the concatenated
/// embedding width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AeConfig {
    pub rtg_width: usize,
    pub obs_width: usize,
    pub act_width: usize,
    pub latent: usize,
    pub hidden: usize,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            rtg_width: 8,
            obs_width: 32,
            act_width: 16,
            latent: 16,
            hidden: 64,
        }
    }
}

impl AeConfig {
    pub fn concat_width(&self) -> usize {
        self.rtg_width + self.obs_width + self.act_width
    }

    /// Width of the `(R', o')` query features.
    pub fn query_width(&self) -> usize {
        self.rtg_width + self.obs_width
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.rtg_width, self.obs_width, self.act_width, self.latent, self.hidden];
        if w.contains(&0) {
            return Err(Error::Config("autoencoder widths must be >= 1".into()));
        }
        if self.latent >= self.concat_width() {
            return Err(Error::Config(format!(
                "latent width {} must be below the embedding width {}",
                self.latent,
                self.concat_width()
            )));
        }
        Ok(())
    }
}

/// Per-component standardization applied before encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentStats {
    pub rtg_mean: f64,
    pub rtg_std: f64,
    pub obs_mean: Vec<f64>,
    pub obs_std: Vec<f64>,
    pub act_mean: Vec<f64>,
    pub act_std: Vec<f64>,
}

fn mean_std(n: usize, width: usize, rows: impl Iterator<Item = f64> + Clone) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; width];
    for (i, v) in rows.clone().enumerate() {
        mean[i % width] += v;
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; width];
    for (i, v) in rows.enumerate() {
        var[i % width] += (v - mean[i % width]).powi(2);
    }
    let std = var
        .into_iter()
        .map(|s| {
            let sd = (s / n as f64).sqrt();
            if sd > 1e-12 { sd } else { 1.0 }
        })
        .collect();
    (mean, std)
}

impl ComponentStats {
    pub fn compute(trajectories: &[Trajectory]) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| Error::Argument("no trajectories to compute stats from".into()))?;
        let n: usize = trajectories.iter().map(Trajectory::len).sum();
        let (rm, rs) = mean_std(n, 1, trajectories.iter().flat_map(|t| t.returns_to_go.iter().copied()));
        let (om, os) = mean_std(n, first.obs_dim, trajectories.iter().flat_map(|t| t.observations.iter().copied()));
        let (am, a_s) = mean_std(n, first.act_dim, trajectories.iter().flat_map(|t| t.actions.iter().copied()));
        Ok(Self {
            rtg_mean: rm[0],
            rtg_std: rs[0],
            obs_mean: om,
            obs_std: os,
            act_mean: am,
            act_std: a_s,
        })
    }

    pub fn write(&self, w: &mut Writer) {
        w.f64(self.rtg_mean);
        w.f64(self.rtg_std);
        w.u32(self.obs_mean.len() as u32);
        w.f64s(&self.obs_mean);
        w.f64s(&self.obs_std);
        w.u32(self.act_mean.len() as u32);
        w.f64s(&self.act_mean);
        w.f64s(&self.act_std);
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self> {
        let rtg_mean = r.f64()?;
        let rtg_std = r.f64()?;
        let od = r.u32()? as usize;
        if od > 1 << 16 {
            return Err(r.err("implausible observation width"));
        }
        let obs_mean = r.f64s(od)?;
        let obs_std = r.f64s(od)?;
        let ad = r.u32()? as usize;
        if ad > 1 << 16 {
            return Err(r.err("implausible action width"));
        }
        Ok(Self {
            rtg_mean,
            rtg_std,
            obs_mean,
            obs_std,
            act_mean: r.f64s(ad)?,
            act_std: r.f64s(ad)?,
        })
    }
}

fn standardize(values: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    let w = mean.len();
    values.iter().enumerate().map(|(i, v)| (v - mean[i % w]) / std[i % w]).collect()
}

fn destandardize(values: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    let w = mean.len();
    values.iter().enumerate().map(|(i, v)| v * std[i % w] + mean[i % w]).collect()
}

/// Three component encoders, a linear bottleneck and three decoders. Once
/// frozen, the parameters can no longer be borrowed mutably.
#[derive(Clone, Debug)]
pub struct AutoencoderModel {
    config: AeConfig,
    obs_dim: usize,
    act_dim: usize,
    stats: ComponentStats,
    store: ParamStore,
    pub(crate) enc_rtg: Mlp,
    pub(crate) enc_obs: Mlp,
    pub(crate) enc_act: Mlp,
    pub(crate) bottleneck: Linear,
    pub(crate) dec_rtg: Mlp,
    pub(crate) dec_obs: Mlp,
    pub(crate) dec_act: Mlp,
    frozen: bool,
}

/// Outputs of one graph forward pass through the autoencoder.
pub(crate) struct AeForward {
    pub rtg: Var,
    pub obs: Var,
    pub act: Var,
}

impl AutoencoderModel {
    pub fn new(config: AeConfig, obs_dim: usize, act_dim: usize, stats: ComponentStats, seed: u64) -> Result<Self> {
        config.validate()?;
        if stats.obs_mean.len() != obs_dim || stats.act_mean.len() != act_dim {
            return Err(Error::dim(
                "AutoencoderModel::new",
                &[stats.obs_mean.len(), stats.act_mean.len()],
                &[obs_dim, act_dim],
            ));
        }
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        let h = config.hidden;
        let relu = Activation::Relu;
        let enc_rtg = Mlp::new(&mut store, "enc_rtg", &[1, h, h, config.rtg_width], relu, &mut rng)?;
        let enc_obs = Mlp::new(&mut store, "enc_obs", &[obs_dim, h, h, config.obs_width], relu, &mut rng)?;
        let enc_act = Mlp::new(&mut store, "enc_act", &[act_dim, h, h, config.act_width], relu, &mut rng)?;
        let bottleneck = Linear::new(&mut store, "bottleneck", config.concat_width(), config.latent, &mut rng)?;
        let dec_rtg = Mlp::new(&mut store, "dec_rtg", &[config.latent, h, h, 1], relu, &mut rng)?;
        let dec_obs = Mlp::new(&mut store, "dec_obs", &[config.latent, h, h, obs_dim], relu, &mut rng)?;
        let dec_act = Mlp::new(&mut store, "dec_act", &[config.latent, h, h, act_dim], relu, &mut rng)?;
        Ok(Self {
            config,
            obs_dim,
            act_dim,
            stats,
            store,
            enc_rtg,
            enc_obs,
            enc_act,
            bottleneck,
            dec_rtg,
            dec_obs,
            dec_act,
            frozen: false,
        })
    }

    /// Rebuilds a model from stored tensors; the result is frozen.
    pub fn from_tensors(
        config: AeConfig,
        obs_dim: usize,
        act_dim: usize,
        stats: ComponentStats,
        tensors: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        let mut m = Self::new(config, obs_dim, act_dim, stats, 0)?;
        m.store.load_values(tensors)?;
        m.frozen = true;
        Ok(m)
    }

    pub fn config(&self) -> &AeConfig {
        &self.config
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn stats(&self) -> &ComponentStats {
        &self.stats
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Mutable access for training; refused once frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParamStore> {
        if self.frozen {
            return Err(Error::State("autoencoder is frozen".into()));
        }
        Ok(&mut self.store)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn fingerprint(&self) -> String {
        self.store.fingerprint()
    }

    pub(crate) fn decoder_params(&self) -> [Vec<String>; 3] {
        [self.dec_rtg.param_names(), self.dec_obs.param_names(), self.dec_act.param_names()]
    }

    pub(crate) fn trunk_params(&self) -> Vec<String> {
        let mut v = self.enc_rtg.param_names();
        v.extend(self.enc_obs.param_names());
        v.extend(self.enc_act.param_names());
        v.extend(self.bottleneck.param_names());
        v
    }

    pub fn standardize_rtg(&self, rtg: &[f64]) -> Vec<f64> {
        standardize(rtg, &[self.stats.rtg_mean], &[self.stats.rtg_std])
    }

    pub fn standardize_obs(&self, obs: &[f64]) -> Vec<f64> {
        standardize(obs, &self.stats.obs_mean, &self.stats.obs_std)
    }

    pub fn standardize_act(&self, act: &[f64]) -> Vec<f64> {
        standardize(act, &self.stats.act_mean, &self.stats.act_std)
    }

    fn check_rows(&self, op: &'static str, n: usize, obs: Option<&[f64]>, act: Option<&[f64]>) -> Result<()> {
        if let Some(o) = obs {
            if o.len() != n * self.obs_dim {
                return Err(Error::dim(op, &[o.len()], &[n, self.obs_dim]));
            }
        }
        if let Some(a) = act {
            if a.len() != n * self.act_dim {
                return Err(Error::dim(op, &[a.len()], &[n, self.act_dim]));
            }
        }
        Ok(())
    }

    /// Graph forward on already standardized `[n x .]` inputs.
    pub(crate) fn forward(&self, g: &mut Graph, rtg: Var, obs: Var, act: Var) -> Result<AeForward> {
        let s = &self.store;
        let r = self.enc_rtg.forward(g, s, rtg)?;
        let o = self.enc_obs.forward(g, s, obs)?;
        let a = self.enc_act.forward(g, s, act)?;
        let ro = g.concat_cols(r, o)?;
        let h = g.concat_cols(ro, a)?;
        let latent = self.bottleneck.forward(g, s, h)?;
        Ok(AeForward {
            rtg: self.dec_rtg.forward(g, s, latent)?,
            obs: self.dec_obs.forward(g, s, latent)?,
            act: self.dec_act.forward(g, s, latent)?,
        })
    }

    /// Component embeddings `(R', o', a')` of raw inputs, one row each.
    pub fn encode_components(&self, rtg: &[f64], obs: &[f64], act: &[f64]) -> Result<(Tensor, Tensor, Tensor)> {
        let n = rtg.len();
        self.check_rows("encode_components", n, Some(obs), Some(act))?;
        let s = &self.store;
        Ok((
            self.enc_rtg.apply(s, &Tensor::new(vec![n, 1], self.standardize_rtg(rtg))?)?,
            self.enc_obs.apply(s, &Tensor::new(vec![n, self.obs_dim], self.standardize_obs(obs))?)?,
            self.enc_act.apply(s, &Tensor::new(vec![n, self.act_dim], self.standardize_act(act))?)?,
        ))
    }

    /// The affine bottleneck applied to `[n x (e_R + e_o + e_a)]` rows.
    pub fn bottleneck(&self, h: &Tensor) -> Result<Tensor> {
        if h.cols() != self.config.concat_width() {
            return Err(Error::dim("bottleneck", h.shape(), &[h.rows(), self.config.concat_width()]));
        }
        let mut g = Graph::inference();
        let x = g.constant(h.clone());
        let y = self.bottleneck.forward(&mut g, &self.store, x)?;
        Ok(g.value(y).clone())
    }

    /// Bottleneck weight `[(e_R + e_o + e_a) x N_latent]` and bias `[N_latent]`.
    pub fn bottleneck_affine(&self) -> Result<(&Tensor, &Tensor)> {
        Ok((
            self.store.value(&self.bottleneck.weight)?,
            self.store.value(&self.bottleneck.bias)?,
        ))
    }

    /// Latent rows for raw `(R, o, a)` triples.
    pub fn encode(&self, rtg: &[f64], obs: &[f64], act: &[f64]) -> Result<Tensor> {
        let (r, o, a) = self.encode_components(rtg, obs, act)?;
        let n = rtg.len();
        let mut h = Vec::with_capacity(n * self.config.concat_width());
        for i in 0..n {
            h.extend_from_slice(r.row(i));
            h.extend_from_slice(o.row(i));
            h.extend_from_slice(a.row(i));
        }
        self.bottleneck(&Tensor::new(vec![n, self.config.concat_width()], h)?)
    }

    fn check_latent(&self, op: &'static str, latent: &Tensor) -> Result<()> {
        if latent.cols() != self.config.latent {
            return Err(Error::dim(op, latent.shape(), &[latent.rows(), self.config.latent]));
        }
        Ok(())
    }

    /// Reconstructions `(R, o, a)` in raw units.
    pub fn decode(&self, latent: &Tensor) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        self.check_latent("decode", latent)?;
        let s = &self.store;
        let st = &self.stats;
        Ok((
            destandardize(self.dec_rtg.apply(s, latent)?.data(), &[st.rtg_mean], &[st.rtg_std]),
            destandardize(self.dec_obs.apply(s, latent)?.data(), &st.obs_mean, &st.obs_std),
            destandardize(self.dec_act.apply(s, latent)?.data(), &st.act_mean, &st.act_std),
        ))
    }

    /// Candidate actions `a'` from latent rows, using only the action decoder.
    pub fn decode_action(&self, latent: &Tensor) -> Result<Vec<f64>> {
        if !self.frozen {
            return Err(Error::State("decode_action needs a frozen autoencoder".into()));
        }
        self.check_latent("decode_action", latent)?;
        let st = &self.stats;
        Ok(destandardize(
            self.dec_act.apply(&self.store, latent)?.data(),
            &st.act_mean,
            &st.act_std,
        ))
    }

    /// Query features `concat(R', o')` for raw returns and observations. The
    /// action encoder is never touched.
    pub fn query_features(&self, rtg: &[f64], obs: &[f64]) -> Result<Tensor> {
        if !self.frozen {
            return Err(Error::State("queries need a frozen autoencoder".into()));
        }
        let n = rtg.len();
        self.check_rows("query_features", n, Some(obs), None)?;
        let s = &self.store;
        let r = self.enc_rtg.apply(s, &Tensor::new(vec![n, 1], self.standardize_rtg(rtg))?)?;
        let o = self.enc_obs.apply(s, &Tensor::new(vec![n, self.obs_dim], self.standardize_obs(obs))?)?;
        let w = self.config.query_width();
        let mut out = Vec::with_capacity(n * w);
        for i in 0..n {
            out.extend_from_slice(r.row(i));
            out.extend_from_slice(o.row(i));
        }
        Tensor::new(vec![n, w], out)
    }

    /// Mean action embedding `a'` over raw actions, used to fill the action
    /// block when mapping queries into latent space.
    pub fn mean_action_embedding(&self, actions: &[f64]) -> Result<Vec<f64>> {
        let n = actions.len() / self.act_dim.max(1);
        if n == 0 {
            return Err(Error::Argument("no actions to embed".into()));
        }
        self.check_rows("mean_action_embedding", n, None, Some(actions))?;
        let e = self
            .enc_act
            .apply(&self.store, &Tensor::new(vec![n, self.act_dim], self.standardize_act(actions))?)?;
        let w = self.config.act_width;
        let mut mean = vec![0.0; w];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(e.row(i)) {
                *m += v;
            }
        }
        Ok(mean.into_iter().map(|m| m / n as f64).collect())
    }

    pub fn write(&self, w: &mut Writer) {
        let c = &self.config;
        for v in [c.rtg_width, c.obs_width, c.act_width, c.latent, c.hidden, self.obs_dim, self.act_dim] {
            w.u32(v as u32);
        }
        self.stats.write(w);
        w.blob(&crate::nn::checkpoint::encode(&self.store.export_values()));
    }

    /// Reads a model written by [`AutoencoderModel::write`]; it comes back frozen.
    pub fn read(r: &mut Reader<'_>) -> Result<Self> {
        let mut dims = [0usize; 7];
        for d in &mut dims {
            *d = r.u32()? as usize;
            if *d > 1 << 16 {
                return Err(r.err("implausible autoencoder width"));
            }
        }
        let config = AeConfig {
            rtg_width: dims[0],
            obs_width: dims[1],
            act_width: dims[2],
            latent: dims[3],
            hidden: dims[4],
        };
        let at = r.offset();
        config.validate().map_err(|e| crate::Error::format(at, e.to_string()))?;
        let stats = ComponentStats::read(r)?;
        let at = r.offset();
        let blob = r.blob()?;
        let tensors = crate::nn::checkpoint::decode(blob)
            .map_err(|e| Error::format(at, format!("embedded checkpoint: {e}")))?;
        Self::from_tensors(config, dims[5], dims[6], stats, tensors).map_err(|e| Error::format(at, e.to_string()))
    }
}
