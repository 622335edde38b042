//! Deterministic point-mass goal-reaching environments and scripted
//! behavior policies of graded quality.
//!
//! The state is a 2-D double integrator. Each step applies the clamped action
//! as an acceleration, integrates velocity then position, clamps the position
//! to the arena, and pays `-|p - goal| - c|a|^2` (plus a flat penalty while
//! inside the obstacle disc of the hard variant).

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use crate::data::{Trajectory, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::nn::NnRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    PointMass,
    Obstacle,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::PointMass => "point_mass",
            Variant::Obstacle => "obstacle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "point_mass" => Ok(Variant::PointMass),
            "obstacle" => Ok(Variant::Obstacle),
            _ => Err(Error::Config(format!("unknown env variant `{s}` (point_mass|obstacle)"))),
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Variant::PointMass => 0,
            Variant::Obstacle => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Variant::PointMass),
            1 => Some(Variant::Obstacle),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
    /// Charged per step while the position lies inside the disc.
    pub penalty: f64,
}

/// Mean episode returns of the random and scripted-expert policies, used to
/// normalize scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchors {
    pub random: f64,
    pub expert: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub name: String,
    pub variant: Variant,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub horizon: usize,
    pub max_episode_len: usize,
    pub dt: f64,
    pub action_cost: f64,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub arena_half_width: f64,
    pub goal: [f64; 2],
    pub init_low: [f64; 2],
    pub init_high: [f64; 2],
    /// Initial velocity components are uniform in `±init_speed`.
    pub init_speed: f64,
    pub obstacle: Option<Obstacle>,
    pub anchors: Option<Anchors>,
}

pub const ANCHOR_EPISODES: usize = 1000;
const ANCHOR_SEED: u64 = 0xA11C_0000;

impl EnvSpec {
    fn base(name: &str, variant: Variant) -> Self {
        Self {
            name: name.to_string(),
            variant,
            obs_dim: 4,
            act_dim: 2,
            horizon: 100,
            max_episode_len: 1000,
            dt: 0.1,
            action_cost: 0.01,
            action_low: vec![-1.0, -1.0],
            action_high: vec![1.0, 1.0],
            arena_half_width: 2.0,
            goal: [0.0, 0.0],
            init_low: [-1.5, -1.5],
            init_high: [1.5, 1.5],
            init_speed: 0.5,
            obstacle: None,
            anchors: None,
        }
    }

    /// Open-arena goal reaching, with measured normalization anchors.
    pub fn point_mass() -> Self {
        Self::base("point_mass", Variant::PointMass).with_anchors()
    }

    /// Starts on the left, goal on the right, penalty disc in between.
    pub fn obstacle() -> Self {
        let mut s = Self::base("obstacle", Variant::Obstacle);
        s.goal = [1.5, 0.0];
        s.init_low = [-1.8, -1.2];
        s.init_high = [-1.0, 1.2];
        s.obstacle = Some(Obstacle {
            center: [0.0, 0.0],
            radius: 0.6,
            penalty: 5.0,
        });
        s.with_anchors()
    }

    pub fn for_variant(v: Variant) -> Self {
        match v {
            Variant::PointMass => Self::point_mass(),
            Variant::Obstacle => Self::obstacle(),
        }
    }

    pub fn with_anchors(mut self) -> Self {
        self.anchors = Some(measure_anchors(&self));
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.obs_dim != 4 || self.act_dim != 2 {
            return Err(Error::Config("point-mass environments have obs_dim 4, act_dim 2".into()));
        }
        if self.horizon == 0 || self.horizon > self.max_episode_len {
            return Err(Error::Config(format!(
                "horizon {} must be in 1..={}",
                self.horizon, self.max_episode_len
            )));
        }
        if self.action_low.len() != self.act_dim
            || self.action_high.len() != self.act_dim
            || self.action_low.iter().zip(&self.action_high).any(|(l, h)| !(l < h))
        {
            return Err(Error::Config("action bounds must satisfy low < high per dimension".into()));
        }
        Ok(())
    }

    /// Largest possible magnitude of a single-step reward.
    pub fn reward_bound(&self) -> f64 {
        let diameter = 2.0 * self.arena_half_width * 2f64.sqrt();
        let goal_off = self.goal[0].hypot(self.goal[1]);
        let act: f64 = self
            .action_low
            .iter()
            .zip(&self.action_high)
            .map(|(l, h)| l.abs().max(h.abs()).powi(2))
            .sum();
        let pen = self.obstacle.map_or(0.0, |o| o.penalty);
        diameter / 2.0 + goal_off + self.action_cost * act + pen
    }

    /// Normalized score `100 (ret - random) / (expert - random)`.
    pub fn normalized_score(&self, ret: f64) -> Result<f64> {
        let a = self
            .anchors
            .ok_or_else(|| Error::State(format!("env `{}` has no anchors", self.name)))?;
        Ok(100.0 * (ret - a.random) / (a.expert - a.random))
    }

    pub fn clamp_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(a, (l, h))| a.clamp(*l, *h))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub position: Vec<f64>,
    pub velocity: Vec<f64>,
    pub step: usize,
}

impl EnvState {
    pub fn observation(&self) -> Vec<f64> {
        let mut o = self.position.clone();
        o.extend_from_slice(&self.velocity);
        o
    }
}

pub fn env_reset(spec: &EnvSpec, seed: u64) -> EnvState {
    let mut rng = NnRng::seed_from_u64(seed);
    let position = (0..2)
        .map(|i| rng.random_range(spec.init_low[i]..=spec.init_high[i]))
        .collect();
    let velocity = (0..2)
        .map(|_| {
            if spec.init_speed > 0.0 {
                rng.random_range(-spec.init_speed..=spec.init_speed)
            } else {
                0.0
            }
        })
        .collect();
    EnvState {
        position,
        velocity,
        step: 0,
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn env_step(spec: &EnvSpec, state: &EnvState, action: &[f64]) -> Result<(EnvState, f64)> {
    if state.step >= spec.horizon {
        return Err(Error::State(format!(
            "cannot step terminal state (step {} of horizon {})",
            state.step, spec.horizon
        )));
    }
    if action.len() != spec.act_dim {
        return Err(Error::dim("env_step", &[action.len()], &[spec.act_dim]));
    }
    let a = spec.clamp_action(action);
    let hw = spec.arena_half_width;
    let mut position = state.position.clone();
    let mut velocity = state.velocity.clone();
    for i in 0..2 {
        velocity[i] += spec.dt * a[i];
        position[i] += spec.dt * velocity[i];
        if position[i] > hw || position[i] < -hw {
            position[i] = position[i].clamp(-hw, hw);
            velocity[i] = 0.0;
        }
    }
    let mut reward = -dist(&position, &spec.goal) - spec.action_cost * a.iter().map(|x| x * x).sum::<f64>();
    if let Some(o) = spec.obstacle {
        if dist(&position, &o.center) < o.radius {
            reward -= o.penalty;
        }
    }
    Ok((
        EnvState {
            position,
            velocity,
            step: state.step + 1,
        },
        reward,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TierKind {
    Expert,
    Medium,
    MediumReplay,
    Random,
}

impl TierKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TierKind::Expert => "expert",
            TierKind::Medium => "medium",
            TierKind::MediumReplay => "medium_replay",
            TierKind::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(TierKind::Expert),
            "medium" => Ok(TierKind::Medium),
            "medium_replay" => Ok(TierKind::MediumReplay),
            "random" => Ok(TierKind::Random),
            _ => Err(Error::Config(format!(
                "unknown tier `{s}` (expert|medium|medium_replay|random)"
            ))),
        }
    }

    pub fn code(self) -> u8 {
        match self {
            TierKind::Expert => 0,
            TierKind::Medium => 1,
            TierKind::MediumReplay => 2,
            TierKind::Random => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        [TierKind::Expert, TierKind::Medium, TierKind::MediumReplay, TierKind::Random]
            .into_iter()
            .find(|t| t.code() == c)
    }
}

/// A scripted PD controller `u = -kp (p - target) - kd v + noise`, clamped to
/// the action bounds. The random tier ignores the observation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyTier {
    pub kind: TierKind,
    pub kp: f64,
    pub kd: f64,
    pub noise: f64,
    /// Whether the controller steers around the obstacle through a waypoint.
    pub avoid_obstacle: bool,
    pub seed: u64,
}

/// Gains that score well on both variants (see the gain-search test).
pub const EXPERT_GAINS: (f64, f64) = (3.0, 2.5);
pub const MEDIUM_GAINS: (f64, f64) = (0.06, 0.1);

impl PolicyTier {
    pub fn expert() -> Self {
        Self {
            kind: TierKind::Expert,
            kp: EXPERT_GAINS.0,
            kd: EXPERT_GAINS.1,
            noise: 0.05,
            avoid_obstacle: true,
            seed: 0,
        }
    }

    pub fn medium() -> Self {
        Self {
            kind: TierKind::Medium,
            kp: MEDIUM_GAINS.0,
            kd: MEDIUM_GAINS.1,
            noise: 0.3,
            avoid_obstacle: false,
            seed: 0,
        }
    }

    /// Starting point of the medium-replay gain schedule.
    pub fn medium_replay() -> Self {
        Self {
            kind: TierKind::MediumReplay,
            ..Self::medium()
        }
    }

    pub fn random() -> Self {
        Self {
            kind: TierKind::Random,
            kp: 0.0,
            kd: 0.0,
            noise: 0.0,
            avoid_obstacle: false,
            seed: 0,
        }
    }

    pub fn for_kind(kind: TierKind) -> Self {
        match kind {
            TierKind::Expert => Self::expert(),
            TierKind::Medium => Self::medium(),
            TierKind::MediumReplay => Self::medium_replay(),
            TierKind::Random => Self::random(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Controller at fraction `frac` of the medium-replay schedule: gains and
    /// noise move linearly from a weak, noisy controller to the medium one.
    pub fn replay_stage(&self, frac: f64) -> Self {
        let frac = frac.clamp(0.0, 1.0);
        let m = Self::medium();
        let lerp = |a: f64, b: f64| a + (b - a) * frac;
        Self {
            kind: TierKind::MediumReplay,
            kp: lerp(0.01, m.kp),
            kd: lerp(0.0, m.kd),
            noise: lerp(0.8, m.noise),
            ..*self
        }
    }
}

/// The point the controller steers toward: the goal, or a waypoint beside the
/// obstacle while the straight path would cross it.
pub fn steering_target(spec: &EnvSpec, position: &[f64], avoid: bool) -> [f64; 2] {
    let Some(o) = spec.obstacle.filter(|_| avoid) else {
        return spec.goal;
    };
    let clearance = o.radius + 0.35;
    if position[0] < o.center[0] {
        // segment-to-disc distance from position to goal
        let (px, py) = (position[0], position[1]);
        let (gx, gy) = (spec.goal[0], spec.goal[1]);
        let (dx, dy) = (gx - px, gy - py);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((o.center[0] - px) * dx + (o.center[1] - py) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (cx, cy) = (px + t * dx, py + t * dy);
        if (cx - o.center[0]).hypot(cy - o.center[1]) < clearance {
            let side = if py >= o.center[1] { 1.0 } else { -1.0 };
            return [o.center[0], o.center[1] + side * clearance];
        }
    }
    spec.goal
}

pub fn scripted_action(spec: &EnvSpec, tier: &PolicyTier, obs: &[f64], rng: &mut NnRng) -> Result<Vec<f64>> {
    if obs.len() != spec.obs_dim {
        return Err(Error::dim("scripted_action", &[obs.len()], &[spec.obs_dim]));
    }
    if tier.kind == TierKind::Random {
        return Ok((0..spec.act_dim)
            .map(|i| rng.random_range(spec.action_low[i]..=spec.action_high[i]))
            .collect());
    }
    let (p, v) = obs.split_at(2);
    let target = steering_target(spec, p, tier.avoid_obstacle);
    let mut u: Vec<f64> = (0..2).map(|i| -tier.kp * (p[i] - target[i]) - tier.kd * v[i]).collect();
    if tier.noise > 0.0 {
        for x in &mut u {
            let z: f64 = StandardNormal.sample(rng);
            *x += tier.noise * z;
        }
    }
    Ok(spec.clamp_action(&u))
}

/// Rolls out one full episode of `tier` from `env_reset(spec, episode_seed)`.
pub fn rollout(spec: &EnvSpec, tier: &PolicyTier, episode_seed: u64) -> Result<Trajectory> {
    let mut state = env_reset(spec, episode_seed);
    let mut rng = NnRng::seed_from_u64(episode_seed ^ 0x5EED_AC7_10u64);
    let mut observations = Vec::with_capacity(spec.horizon * spec.obs_dim);
    let mut actions = Vec::with_capacity(spec.horizon * spec.act_dim);
    let mut rewards = Vec::with_capacity(spec.horizon);
    while state.step < spec.horizon {
        let obs = state.observation();
        let a = scripted_action(spec, tier, &obs, &mut rng)?;
        let (next, r) = env_step(spec, &state, &a)?;
        observations.extend_from_slice(&obs);
        actions.extend_from_slice(&a);
        rewards.push(r);
        state = next;
    }
    Trajectory::new(spec.obs_dim, spec.act_dim, observations, actions, rewards, tier.kind, episode_seed)
}

/// Seed of the `index`-th episode of a collection seeded with `seed`
/// (SplitMix64 finalizer).
pub fn episode_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn mean_return(spec: &EnvSpec, tier: &PolicyTier, episodes: usize, seed: u64) -> Result<(f64, f64)> {
    let rets = (0..episodes)
        .map(|i| rollout(spec, tier, episode_seed(seed, i as u64)).map(|t| t.total_return()))
        .collect::<Result<Vec<f64>>>()?;
    let n = rets.len() as f64;
    let mean = rets.iter().sum::<f64>() / n;
    let var = rets.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok((mean, var.sqrt()))
}

/// Random and expert mean returns over [`ANCHOR_EPISODES`] fixed seeds.
pub fn measure_anchors(spec: &EnvSpec) -> Anchors {
    let random = mean_return(spec, &PolicyTier::random(), ANCHOR_EPISODES, ANCHOR_SEED)
        .expect("anchor rollout")
        .0;
    let expert = mean_return(spec, &PolicyTier::expert(), ANCHOR_EPISODES, ANCHOR_SEED + 1)
        .expect("anchor rollout")
        .0;
    Anchors { random, expert }
}

/// Generates `n_traj` episodes of `tier`. For the medium-replay tier the
/// controller anneals across the collection from weak to medium.
pub fn generate_dataset(spec: &EnvSpec, tier: &PolicyTier, n_traj: usize, seed: u64) -> Result<TrajectoryDataset> {
    if n_traj == 0 {
        return Err(Error::Argument("n_traj must be >= 1".into()));
    }
    spec.validate()?;
    let tier = tier.with_seed(seed);
    let trajectories = (0..n_traj)
        .map(|i| {
            let controller = if tier.kind == TierKind::MediumReplay {
                let frac = if n_traj > 1 { i as f64 / (n_traj - 1) as f64 } else { 1.0 };
                tier.replay_stage(frac)
            } else {
                tier
            };
            rollout(spec, &controller, episode_seed(seed, i as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    TrajectoryDataset::new(spec.clone(), tier.kind, seed, trajectories)
}
