use rand::Rng;
use serde::Serialize;

use super::model::AutoencoderModel;
use crate::data::Trajectory;
use crate::error::{Error, Result};
use crate::nn::{rng_from_seed, AdamW, AdamWConfig, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub optim: AdamWConfig,
    pub seed: u64,
    /// Loss curve sampling interval in steps.
    pub log_every: usize,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 256,
            optim: AdamWConfig {
                lr: 1e-3,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            seed: 0,
            log_every: 100,
        }
    }
}

/// Per-component reconstruction losses, in standardized units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ComponentLosses {
    pub rtg: f64,
    pub obs: f64,
    pub act: f64,
}

impl ComponentLosses {
    pub fn total(&self) -> f64 {
        self.rtg + self.obs + self.act
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.rtg, self.obs, self.act]
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CurvePoint {
    pub step: usize,
    pub losses: ComponentLosses,
}

/// Reconstruction error of one component relative to its variance.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ReconstructionError {
    pub mse: ComponentLosses,
    pub variance: ComponentLosses,
}

impl ReconstructionError {
    pub fn relative(&self) -> [f64; 3] {
        let m = self.mse.as_array();
        let v = self.variance.as_array();
        [m[0] / v[0], m[1] / v[1], m[2] / v[2]]
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AeTrainReport {
    pub curve: Vec<CurvePoint>,
    pub steps: usize,
}

/// Standardized `(R, o, a)` rows of a trajectory set, flattened over time.
struct Rows {
    n: usize,
    rtg: Vec<f64>,
    obs: Vec<f64>,
    act: Vec<f64>,
}

impl Rows {
    fn new(model: &AutoencoderModel, trajectories: &[Trajectory]) -> Result<Self> {
        let (od, ad) = (model.obs_dim(), model.act_dim());
        if trajectories.is_empty() {
            return Err(Error::Argument("no trajectories for the autoencoder".into()));
        }
        if trajectories.iter().any(|t| t.obs_dim != od || t.act_dim != ad) {
            return Err(Error::Config("trajectory dims disagree with the autoencoder".into()));
        }
        let mut rtg = Vec::new();
        let mut obs = Vec::new();
        let mut act = Vec::new();
        for t in trajectories {
            rtg.extend(model.standardize_rtg(&t.returns_to_go));
            obs.extend(model.standardize_obs(&t.observations));
            act.extend(model.standardize_act(&t.actions));
        }
        Ok(Self {
            n: rtg.len(),
            rtg,
            obs,
            act,
        })
    }

    fn gather(&self, idx: &[usize], od: usize, ad: usize) -> (Tensor, Tensor, Tensor) {
        let b = idx.len();
        let mut r = Vec::with_capacity(b);
        let mut o = Vec::with_capacity(b * od);
        let mut a = Vec::with_capacity(b * ad);
        for &i in idx {
            r.push(self.rtg[i]);
            o.extend_from_slice(&self.obs[i * od..(i + 1) * od]);
            a.extend_from_slice(&self.act[i * ad..(i + 1) * ad]);
        }
        (
            Tensor::new(vec![b, 1], r).expect("gathered shape"),
            Tensor::new(vec![b, od], o).expect("gathered shape"),
            Tensor::new(vec![b, ad], a).expect("gathered shape"),
        )
    }
}

/// Builds the loss graph for one batch and returns it with the three loss nodes.
fn losses_graph(
    model: &AutoencoderModel,
    g: &mut Graph,
    r: Tensor,
    o: Tensor,
    a: Tensor,
) -> Result<[crate::nn::Var; 3]> {
    let b = r.rows();
    let (rd, od, ad) = (r.data().to_vec(), o.data().to_vec(), a.data().to_vec());
    let (obs_w, act_w) = (o.cols(), a.cols());
    let rv = g.constant(r);
    let ov = g.constant(o);
    let av = g.constant(a);
    let f = model.forward(g, rv, ov, av)?;
    let ones = vec![1.0; b];
    Ok([
        g.weighted_sq_err(f.rtg, rd, ones.clone(), b as f64)?,
        g.weighted_sq_err(f.obs, od, ones.clone(), (b * obs_w) as f64)?,
        g.weighted_sq_err(f.act, ad, ones, (b * act_w) as f64)?,
    ])
}

fn current_losses(model: &AutoencoderModel, rows: &Rows) -> Result<ComponentLosses> {
    let idx: Vec<usize> = (0..rows.n).collect();
    let (r, o, a) = rows.gather(&idx, model.obs_dim(), model.act_dim());
    let mut g = Graph::inference();
    let l = losses_graph(model, &mut g, r, o, a)?;
    Ok(ComponentLosses {
        rtg: g.value(l[0]).item(),
        obs: g.value(l[1]).item(),
        act: g.value(l[2]).item(),
    })
}

/// Trains the encoders, bottleneck and decoders on `trajectories`, then
/// freezes the model. Each decoder has its own AdamW instance; a fourth one
/// owns the shared encoders and bottleneck, which receive the summed gradient
/// of the three reconstruction losses.
pub fn train_autoencoder(
    mut model: AutoencoderModel,
    trajectories: &[Trajectory],
    cfg: &AeTrainConfig,
) -> Result<(AutoencoderModel, AeTrainReport)> {
    if model.is_frozen() {
        return Err(Error::State("cannot train a frozen autoencoder".into()));
    }
    if cfg.batch == 0 || cfg.log_every == 0 {
        return Err(Error::Argument("batch and log_every must be >= 1".into()));
    }
    let rows = Rows::new(&model, trajectories)?;
    let (od, ad) = (model.obs_dim(), model.act_dim());
    let [dr, dobs, dact] = model.decoder_params();
    let trunk = model.trunk_params();
    let mut opts = {
        let store = model.params();
        [
            AdamW::new(cfg.optim, store, trunk)?,
            AdamW::new(cfg.optim, store, dr)?,
            AdamW::new(cfg.optim, store, dobs)?,
            AdamW::new(cfg.optim, store, dact)?,
        ]
    };
    let mut rng = rng_from_seed(cfg.seed);
    let mut curve = Vec::new();
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..rows.n)).collect();
        let (r, o, a) = rows.gather(&idx, od, ad);
        let mut g = Graph::new();
        let l = losses_graph(&model, &mut g, r, o, a)?;
        let losses = ComponentLosses {
            rtg: g.value(l[0]).item(),
            obs: g.value(l[1]).item(),
            act: g.value(l[2]).item(),
        };
        if !losses.total().is_finite() {
            return Err(Error::NonFiniteLoss { step: step as u64 });
        }
        if step % cfg.log_every == 0 {
            curve.push(CurvePoint { step, losses });
        }
        let s = g.add(l[0], l[1])?;
        let total = g.add(s, l[2])?;
        let grads = g.backward(total)?;
        let store = model.params_mut()?;
        store.zero_grad();
        store.accumulate(&grads)?;
        for opt in &mut opts {
            opt.step(store)?;
        }
    }
    curve.push(CurvePoint {
        step: cfg.steps,
        losses: current_losses(&model, &rows)?,
    });
    model.freeze();
    Ok((
        model,
        AeTrainReport {
            curve,
            steps: cfg.steps,
        },
    ))
}

/// Per-component MSE on `trajectories` against each component's variance,
/// both in the model's standardized units.
pub fn reconstruction_error(model: &AutoencoderModel, trajectories: &[Trajectory]) -> Result<ReconstructionError> {
    let rows = Rows::new(model, trajectories)?;
    let mse = current_losses(model, &rows)?;
    let var = |v: &[f64], w: usize| {
        let n = v.len() / w;
        let mut total = 0.0;
        for d in 0..w {
            let mean = (0..n).map(|i| v[i * w + d]).sum::<f64>() / n as f64;
            total += (0..n).map(|i| (v[i * w + d] - mean).powi(2)).sum::<f64>() / n as f64;
        }
        total / w as f64
    };
    Ok(ReconstructionError {
        mse,
        variance: ComponentLosses {
            rtg: var(&rows.rtg, 1),
            obs: var(&rows.obs, model.obs_dim()),
            act: var(&rows.act, model.act_dim()),
        },
    })
}
