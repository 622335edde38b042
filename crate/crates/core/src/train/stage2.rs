use serde::Serialize;

use crate::amb::MemoryBuffer;
use crate::data::{sample_windows, ContextBatch, NormStats, Trajectory};
use crate::error::{Error, Result};
use crate::nn::{rng_from_seed, AdamW, AdamWConfig, Graph};
use crate::policy::{PolicyMode, PolicyModel};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyTrainConfig {
    pub optim: AdamWConfig,
    pub batch: usize,
    pub steps: usize,
    pub log_every: usize,
    pub pin_correction: bool,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossPoint {
    pub step: usize,
    pub total: f64,
    pub action: f64,
    pub align: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct PolicyTrainReport {
    /// Total loss of every step, in order.
    pub losses: Vec<f64>,
    /// Per-interval means of the loss components.
    pub curve: Vec<LossPoint>,
    /// Nearest-neighbour lookups performed while training.
    pub retrieval_calls: u64,
}

impl PolicyTrainReport {
    /// Means of the first and last `window` step losses.
    pub fn head_tail_means(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.losses.len();
        if n == 0 {
            return None;
        }
        let w = window.min(n).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.losses[..w]), mean(&self.losses[n - w..])))
    }
}

/// Trains `model` with masked action MSE on windows drawn from
/// `trajectories`, standardized with `stats`. Reframe mode retrieves from
/// `buffer` at every valid position. `on_step(step, model)` runs after each
/// update with the 1-based step count.
pub fn train_policy<F>(
    model: &mut PolicyModel,
    trajectories: &[Trajectory],
    stats: &NormStats,
    buffer: Option<&MemoryBuffer>,
    cfg: &PolicyTrainConfig,
    mut on_step: F,
) -> Result<PolicyTrainReport>
where
    F: FnMut(usize, &PolicyModel) -> Result<()>,
{
    if trajectories.is_empty() {
        return Err(Error::Argument("no training trajectories".into()));
    }
    if cfg.batch == 0 || cfg.log_every == 0 {
        return Err(Error::Argument("batch and log_every must be >= 1".into()));
    }
    if model.mode() == PolicyMode::BaselineDt && buffer.is_some() {
        return Err(Error::Config("baseline_dt mode does not take a memory buffer".into()));
    }
    let mut opt = AdamW::new(cfg.optim, model.params(), model.trainable_params(cfg.pin_correction))?;
    let mut rng = rng_from_seed(cfg.seed);
    let k = model.config().context;
    let mut report = PolicyTrainReport {
        losses: Vec::with_capacity(cfg.steps),
        ..PolicyTrainReport::default()
    };
    let mut acc = [0.0; 3];
    let mut acc_n = 0usize;
    for step in 0..cfg.steps {
        let windows = sample_windows(trajectories, cfg.batch, &mut rng)?;
        let batch = ContextBatch::from_windows(trajectories, &windows, k, stats)?;
        let mut g = Graph::new();
        let (parts, out) = model.loss(&mut g, &batch, buffer, Some(&mut rng))?;
        let total = g.value(parts.total).item();
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { step: step as u64 });
        }
        report.retrieval_calls += out.trace.map_or(0, |t| t.entries.len() as u64);
        acc[0] += total;
        acc[1] += g.value(parts.action).item();
        acc[2] += parts.align.map_or(0.0, |a| g.value(a).item());
        acc_n += 1;
        report.losses.push(total);
        let grads = g.backward(parts.total)?;
        let store = model.params_mut();
        store.zero_grad();
        store.accumulate(&grads)?;
        opt.step(store)?;
        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps {
            let n = acc_n as f64;
            report.curve.push(LossPoint {
                step: step + 1,
                total: acc[0] / n,
                action: acc[1] / n,
                align: acc[2] / n,
            });
            acc = [0.0; 3];
            acc_n = 0;
        }
        on_step(step + 1, model)?;
    }
    Ok(report)
}

/// Masked action MSE of `model` over every window of `trajectories` ending at
/// a multiple of `stride`, without dropout.
pub fn dataset_loss(
    model: &PolicyModel,
    trajectories: &[Trajectory],
    stats: &NormStats,
    buffer: Option<&MemoryBuffer>,
    stride: usize,
) -> Result<f64> {
    let stride = stride.max(1);
    let windows: Vec<_> = trajectories
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            (0..t.len())
                .step_by(stride)
                .map(move |end| crate::data::WindowSpec { trajectory: i, end })
        })
        .collect();
    if windows.is_empty() {
        return Err(Error::Argument("no windows to score".into()));
    }
    let mut sum = 0.0;
    let mut weight = 0.0;
    for chunk in windows.chunks(256) {
        let batch = ContextBatch::from_windows(trajectories, chunk, model.config().context, stats)?;
        let mut g = Graph::inference();
        let (parts, _) = model.loss(&mut g, &batch, buffer, None)?;
        let n = batch.num_valid() as f64;
        sum += g.value(parts.action).item() * n;
        weight += n;
    }
    Ok(sum / weight)
}
