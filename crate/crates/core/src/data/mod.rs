//! Trajectories, datasets and the statistics used to normalize them.

mod batch;
pub mod io;

pub use batch::{sample_context_batch, sample_windows, ContextBatch, WindowSpec};

use sha2::{Digest, Sha256};

use crate::env::{EnvSpec, TierKind};
use crate::error::{Error, Result};

/// Undiscounted suffix sums `R_t = sum_{k >= t} r_k`, accumulated from the
/// last step backwards.
pub fn compute_returns_to_go(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::Argument("returns-to-go of an empty reward sequence".into()));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc += r;
        *o = acc;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub obs_dim: usize,
    pub act_dim: usize,
    /// `T x obs_dim`, row-major.
    pub observations: Vec<f64>,
    /// `T x act_dim`, row-major.
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub returns_to_go: Vec<f64>,
    pub tier: TierKind,
    pub episode_seed: u64,
}

impl Trajectory {
    pub fn new(
        obs_dim: usize,
        act_dim: usize,
        observations: Vec<f64>,
        actions: Vec<f64>,
        rewards: Vec<f64>,
        tier: TierKind,
        episode_seed: u64,
    ) -> Result<Self> {
        let t = rewards.len();
        if observations.len() != t * obs_dim {
            return Err(Error::dim("Trajectory", &[observations.len()], &[t, obs_dim]));
        }
        if actions.len() != t * act_dim {
            return Err(Error::dim("Trajectory", &[actions.len()], &[t, act_dim]));
        }
        let returns_to_go = compute_returns_to_go(&rewards)?;
        Ok(Self {
            obs_dim,
            act_dim,
            observations,
            actions,
            rewards,
            returns_to_go,
            tier,
            episode_seed,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn obs(&self, t: usize) -> &[f64] {
        &self.observations[t * self.obs_dim..(t + 1) * self.obs_dim]
    }

    pub fn action(&self, t: usize) -> &[f64] {
        &self.actions[t * self.act_dim..(t + 1) * self.act_dim]
    }

    pub fn total_return(&self) -> f64 {
        self.returns_to_go[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub obs_mean: Vec<f64>,
    pub obs_std: Vec<f64>,
    /// Returns-to-go are divided by this constant before entering a model.
    pub return_scale: f64,
}

impl NormStats {
    /// Per-dimension observation mean and (population) std over every timestep;
    /// zero-variance dimensions keep std 1. The return scale is the magnitude
    /// of the environment's expert anchor, falling back to the largest
    /// episode-return magnitude in the data.
    pub fn compute(env: &EnvSpec, trajectories: &[Trajectory]) -> Self {
        let d = env.obs_dim;
        let n: usize = trajectories.iter().map(Trajectory::len).sum();
        let mut mean = vec![0.0; d];
        for t in trajectories {
            for row in t.observations.chunks(d) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
        }
        for m in &mut mean {
            *m /= n.max(1) as f64;
        }
        let mut var = vec![0.0; d];
        for t in trajectories {
            for row in t.observations.chunks(d) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n.max(1) as f64).sqrt();
                if sd > 1e-12 { sd } else { 1.0 }
            })
            .collect();
        let return_scale = env
            .anchors
            .map(|a| a.expert.abs())
            .filter(|s| *s > 1e-12)
            .unwrap_or_else(|| {
                trajectories
                    .iter()
                    .map(|t| t.total_return().abs())
                    .fold(1e-12, f64::max)
            });
        Self {
            obs_mean: mean,
            obs_std: std,
            return_scale,
        }
    }

    pub fn normalize_obs(&self, obs: &[f64]) -> Vec<f64> {
        obs.iter()
            .zip(self.obs_mean.iter().zip(&self.obs_std))
            .map(|(o, (m, s))| (o - m) / s)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    pub env: EnvSpec,
    pub tier: TierKind,
    pub seed: u64,
    /// Hex SHA-256 of the generation description.
    pub config_hash: String,
    pub stats: NormStats,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryDataset {
    pub fn new(env: EnvSpec, tier: TierKind, seed: u64, trajectories: Vec<Trajectory>) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::Argument("dataset needs at least one trajectory".into()));
        }
        if trajectories
            .iter()
            .any(|t| t.obs_dim != env.obs_dim || t.act_dim != env.act_dim)
        {
            return Err(Error::Config("trajectory dims disagree with the env spec".into()));
        }
        let config_hash = generation_hash(&env, tier, seed, trajectories.len());
        let stats = NormStats::compute(&env, &trajectories);
        Ok(Self {
            env,
            tier,
            seed,
            config_hash,
            stats,
            trajectories,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn num_timesteps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// The first `n` trajectories as a dataset with its own statistics.
    pub fn take(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::Argument(format!(
                "cannot take {n} of {} trajectories",
                self.len()
            )));
        }
        let mut ds = Self::new(self.env.clone(), self.tier, self.seed, self.trajectories[..n].to_vec())?;
        ds.config_hash = hex_sha(&format!("{}:take:{n}", self.config_hash));
        Ok(ds)
    }

    /// The trajectories at `indices`, in the given order.
    pub fn select(&self, indices: &[usize], label: &str) -> Result<Self> {
        let trajectories = indices
            .iter()
            .map(|&i| {
                self.trajectories
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Argument(format!("trajectory index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut ds = Self::new(self.env.clone(), self.tier, self.seed, trajectories)?;
        ds.config_hash = hex_sha(&format!("{}:select:{label}:{indices:?}", self.config_hash));
        Ok(ds)
    }

    pub fn returns(&self) -> Vec<f64> {
        self.trajectories.iter().map(Trajectory::total_return).collect()
    }
}

fn hex_sha(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}

fn generation_hash(env: &EnvSpec, tier: TierKind, seed: u64, n: usize) -> String {
    hex_sha(&format!("{env:?}|{}|{seed}|{n}", tier.as_str()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rtg_hand_cases() {
        assert_eq!(compute_returns_to_go(&[1.0, 2.0, 3.0]).unwrap(), vec![6.0, 5.0, 3.0]);
        assert_eq!(compute_returns_to_go(&[0.0; 4]).unwrap(), vec![0.0; 4]);
        assert!(compute_returns_to_go(&[]).is_err());
    }

    #[test]
    fn trajectory_shape_checked() {
        assert!(Trajectory::new(2, 1, vec![0.0; 3], vec![0.0; 2], vec![0.0; 2], TierKind::Random, 0).is_err());
        let t = Trajectory::new(2, 1, vec![0.0; 4], vec![0.0; 2], vec![1.0, 2.0], TierKind::Random, 0).unwrap();
        assert_eq!(t.returns_to_go, vec![3.0, 2.0]);
        assert_eq!(*t.returns_to_go.last().unwrap(), *t.rewards.last().unwrap());
    }
}
