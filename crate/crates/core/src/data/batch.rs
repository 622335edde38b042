use rand::Rng;

use super::{NormStats, Trajectory, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::nn::NnRng;

/// A window of at most `K` steps ending at `end` (inclusive) of one trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub trajectory: usize,
    pub end: usize,
}

/// Left-padded context windows. Padded positions carry `mask = false` and
/// zeros in every field.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextBatch {
    pub batch: usize,
    pub context: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
    /// `B x K`, divided by the return scale.
    pub returns_to_go: Vec<f64>,
    /// `B x K x obs_dim`, standardized.
    pub observations: Vec<f64>,
    /// `B x K x act_dim`.
    pub actions: Vec<f64>,
    /// `B x K` absolute episode timesteps.
    pub timesteps: Vec<usize>,
    pub mask: Vec<bool>,
    /// Unscaled returns-to-go, for memory queries.
    pub raw_returns_to_go: Vec<f64>,
    /// Unnormalized observations, for memory queries.
    pub raw_observations: Vec<f64>,
}

impl ContextBatch {
    pub fn zeros(batch: usize, context: usize, obs_dim: usize, act_dim: usize) -> Self {
        let n = batch * context;
        Self {
            batch,
            context,
            obs_dim,
            act_dim,
            returns_to_go: vec![0.0; n],
            observations: vec![0.0; n * obs_dim],
            actions: vec![0.0; n * act_dim],
            timesteps: vec![0; n],
            mask: vec![false; n],
            raw_returns_to_go: vec![0.0; n],
            raw_observations: vec![0.0; n * obs_dim],
        }
    }

    /// Writes `len` consecutive steps into row `b`, right-aligned. `rtg`, `obs`
    /// and `act` hold the raw per-step values; `first_timestep` is the episode
    /// timestep of the first step.
    #[allow(clippy::too_many_arguments)]
    pub fn set_window(
        &mut self,
        b: usize,
        rtg: &[f64],
        obs: &[f64],
        act: &[f64],
        first_timestep: usize,
        stats: &NormStats,
    ) -> Result<()> {
        let len = rtg.len();
        let (k, od, ad) = (self.context, self.obs_dim, self.act_dim);
        if len == 0 || len > k || obs.len() != len * od || act.len() != len * ad || b >= self.batch {
            return Err(Error::dim("ContextBatch::set_window", &[len, obs.len(), act.len()], &[k, od, ad]));
        }
        let pad = k - len;
        for j in 0..k {
            let i = b * k + j;
            if j < pad {
                self.returns_to_go[i] = 0.0;
                self.raw_returns_to_go[i] = 0.0;
                self.observations[i * od..(i + 1) * od].fill(0.0);
                self.raw_observations[i * od..(i + 1) * od].fill(0.0);
                self.actions[i * ad..(i + 1) * ad].fill(0.0);
                self.timesteps[i] = 0;
                self.mask[i] = false;
                continue;
            }
            let s = j - pad;
            self.raw_returns_to_go[i] = rtg[s];
            self.returns_to_go[i] = rtg[s] / stats.return_scale;
            let o = &obs[s * od..(s + 1) * od];
            self.raw_observations[i * od..(i + 1) * od].copy_from_slice(o);
            self.observations[i * od..(i + 1) * od].copy_from_slice(&stats.normalize_obs(o));
            self.actions[i * ad..(i + 1) * ad].copy_from_slice(&act[s * ad..(s + 1) * ad]);
            self.timesteps[i] = first_timestep + s;
            self.mask[i] = true;
        }
        Ok(())
    }

    pub fn from_windows(
        trajectories: &[Trajectory],
        windows: &[WindowSpec],
        context: usize,
        stats: &NormStats,
    ) -> Result<Self> {
        if context == 0 {
            return Err(Error::Argument("context length must be >= 1".into()));
        }
        let first = trajectories
            .first()
            .ok_or_else(|| Error::Argument("no trajectories".into()))?;
        let mut out = Self::zeros(windows.len(), context, first.obs_dim, first.act_dim);
        for (b, w) in windows.iter().enumerate() {
            let t = trajectories
                .get(w.trajectory)
                .ok_or_else(|| Error::Argument(format!("trajectory {} out of range", w.trajectory)))?;
            if w.end >= t.len() {
                return Err(Error::Argument(format!("window end {} beyond length {}", w.end, t.len())));
            }
            let start = (w.end + 1).saturating_sub(context);
            let (od, ad) = (t.obs_dim, t.act_dim);
            out.set_window(
                b,
                &t.returns_to_go[start..=w.end],
                &t.observations[start * od..(w.end + 1) * od],
                &t.actions[start * ad..(w.end + 1) * ad],
                start,
                stats,
            )?;
        }
        Ok(out)
    }

    pub fn num_valid(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Draws `batch_size` windows: the trajectory with probability proportional to
/// its length, then the end index uniformly, which is uniform over timesteps.
pub fn sample_windows(trajectories: &[Trajectory], batch_size: usize, rng: &mut NnRng) -> Result<Vec<WindowSpec>> {
    if batch_size == 0 {
        return Err(Error::Argument("batch_size must be >= 1".into()));
    }
    let total: usize = trajectories.iter().map(Trajectory::len).sum();
    if total == 0 {
        return Err(Error::Argument("cannot sample from an empty dataset".into()));
    }
    let mut cumulative = Vec::with_capacity(trajectories.len());
    let mut acc = 0;
    for t in trajectories {
        acc += t.len();
        cumulative.push(acc);
    }
    Ok((0..batch_size)
        .map(|_| {
            let u = rng.random_range(0..total);
            let trajectory = cumulative.partition_point(|&c| c <= u);
            let before = if trajectory == 0 { 0 } else { cumulative[trajectory - 1] };
            WindowSpec {
                trajectory,
                end: u - before,
            }
        })
        .collect())
}

pub fn sample_context_batch(
    dataset: &TrajectoryDataset,
    batch_size: usize,
    context: usize,
    rng: &mut NnRng,
) -> Result<ContextBatch> {
    if context == 0 {
        return Err(Error::Argument("context length K must be >= 1".into()));
    }
    let windows = sample_windows(&dataset.trajectories, batch_size, rng)?;
    ContextBatch::from_windows(&dataset.trajectories, &windows, context, &dataset.stats)
}
