use serde::Serialize;

use crate::amb::MemoryBuffer;
use crate::data::{ContextBatch, NormStats};
use crate::env::{env_reset, env_step, episode_seed, EnvSpec, EnvState};
use crate::error::{Error, Result};
use crate::nn::Graph;
use crate::policy::{PolicyMode, PolicyModel, Positions};

/// Everything an episode has seen up to the current step `t`: `t + 1`
/// return tokens and observations, `t` actions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeHistory {
    pub returns_to_go: Vec<f64>,
    pub observations: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
}

/// Chooses actions for all episodes of a lockstep rollout at once.
pub trait Actor {
    /// Returns `episodes x act_dim` actions for step `t`.
    fn act(&mut self, spec: &EnvSpec, t: usize, histories: &[EpisodeHistory]) -> Result<Vec<f64>>;
}

/// The newest `min(t + 1, K)` steps of every history as a right-aligned
/// context batch; the current action slot holds zeros.
pub fn context_batch(
    spec: &EnvSpec,
    t: usize,
    histories: &[EpisodeHistory],
    context: usize,
    stats: &NormStats,
) -> Result<ContextBatch> {
    let (od, ad) = (spec.obs_dim, spec.act_dim);
    let mut batch = ContextBatch::zeros(histories.len(), context, od, ad);
    let len = (t + 1).min(context);
    let start = t + 1 - len;
    let mut act = vec![0.0; len * ad];
    for (b, h) in histories.iter().enumerate() {
        if h.returns_to_go.len() != t + 1 {
            return Err(Error::State(format!("history of episode {b} is not at step {t}")));
        }
        act.fill(0.0);
        act[..(len - 1) * ad].copy_from_slice(&h.actions[start * ad..t * ad]);
        batch.set_window(
            b,
            &h.returns_to_go[start..=t],
            &h.observations[start * od..(t + 1) * od],
            &act,
            start,
            stats,
        )?;
    }
    Ok(batch)
}

/// Runs `episodes` episodes in lockstep. Each starts at return token
/// `target`, which drops by every realized reward. Episode `i` resets with
/// `episode_seed(seed, i)`. Returns the histories of all episodes.
pub fn run_episodes(
    spec: &EnvSpec,
    episodes: usize,
    seed: u64,
    target: f64,
    actor: &mut dyn Actor,
) -> Result<Vec<EpisodeHistory>> {
    if episodes == 0 {
        return Err(Error::Argument("episodes must be >= 1".into()));
    }
    let mut states: Vec<EnvState> = (0..episodes)
        .map(|i| env_reset(spec, episode_seed(seed, i as u64)))
        .collect();
    let mut hist: Vec<EpisodeHistory> = states
        .iter()
        .map(|s| EpisodeHistory {
            returns_to_go: vec![target],
            observations: s.observation(),
            ..EpisodeHistory::default()
        })
        .collect();
    let ad = spec.act_dim;
    for t in 0..spec.horizon {
        let actions = actor.act(spec, t, &hist)?;
        if actions.len() != episodes * ad {
            return Err(Error::dim("Actor::act", &[actions.len()], &[episodes, ad]));
        }
        for (i, (state, h)) in states.iter_mut().zip(hist.iter_mut()).enumerate() {
            let a = spec.clamp_action(&actions[i * ad..(i + 1) * ad]);
            let (next, r) = env_step(spec, state, &a)?;
            h.actions.extend_from_slice(&a);
            h.rewards.push(r);
            *state = next;
            if t + 1 < spec.horizon {
                let last = *h.returns_to_go.last().expect("non-empty");
                h.returns_to_go.push(last - r);
                h.observations.extend(state.observation());
            }
        }
    }
    Ok(hist)
}

/// Distance and usage statistics of the retrievals made during evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RetrievalStats {
    pub calls: u64,
    /// Min, 25%, 50%, 75% and max of the squared distances.
    pub distance_sq_quantiles: [f64; 5],
    pub distinct_rows: usize,
    /// Retrieval counts over ten equal slices of the buffer's row range.
    pub row_histogram: Vec<u64>,
}

impl RetrievalStats {
    fn from_hits(distances: &mut [f64], rows: &[usize], buffer_len: usize) -> Self {
        if distances.is_empty() {
            return Self::default();
        }
        distances.sort_by(f64::total_cmp);
        let q = |p: f64| distances[((distances.len() - 1) as f64 * p).round() as usize];
        let mut seen = rows.to_vec();
        seen.sort_unstable();
        seen.dedup();
        let mut row_histogram = vec![0u64; 10];
        for &r in rows {
            row_histogram[(r * 10 / buffer_len.max(1)).min(9)] += 1;
        }
        Self {
            calls: rows.len() as u64,
            distance_sq_quantiles: [q(0.0), q(0.25), q(0.5), q(0.75), q(1.0)],
            distinct_rows: seen.len(),
            row_histogram,
        }
    }
}

/// A trained policy acting through its context window; retrieval happens
/// for the newest step only.
pub struct PolicyActor<'a> {
    pub model: &'a PolicyModel,
    pub stats: &'a NormStats,
    pub buffer: Option<&'a MemoryBuffer>,
    distances: Vec<f64>,
    rows: Vec<usize>,
}

impl<'a> PolicyActor<'a> {
    pub fn new(model: &'a PolicyModel, stats: &'a NormStats, buffer: Option<&'a MemoryBuffer>) -> Result<Self> {
        match (model.mode(), buffer) {
            (PolicyMode::Reframe, None) => return Err(Error::Config("reframe evaluation needs a memory buffer".into())),
            (PolicyMode::BaselineDt, Some(_)) => {
                return Err(Error::Config("baseline_dt evaluation takes no memory buffer".into()))
            }
            _ => {}
        }
        if let Some(buf) = buffer {
            let ae = buf.model();
            if ae.obs_dim() != model.obs_dim()
                || ae.act_dim() != model.act_dim()
                || (ae.config().query_width(), ae.config().latent) != model.query_dims()
            {
                return Err(Error::Config("evaluation buffer dims disagree with the policy".into()));
            }
        }
        Ok(Self {
            model,
            stats,
            buffer,
            distances: Vec::new(),
            rows: Vec::new(),
        })
    }

    pub fn retrieval_stats(&self) -> RetrievalStats {
        let mut d = self.distances.clone();
        RetrievalStats::from_hits(&mut d, &self.rows, self.buffer.map_or(0, |b| b.len()))
    }
}

impl Actor for PolicyActor<'_> {
    fn act(&mut self, spec: &EnvSpec, t: usize, histories: &[EpisodeHistory]) -> Result<Vec<f64>> {
        if spec.obs_dim != self.model.obs_dim() || spec.act_dim != self.model.act_dim() {
            return Err(Error::Config("environment dims disagree with the policy".into()));
        }
        if t >= self.model.config().max_ep_len {
            return Err(Error::Config("episode longer than the policy's max_ep_len".into()));
        }
        let batch = context_batch(spec, t, histories, self.model.config().context, self.stats)?;
        let mut g = Graph::inference();
        let out = self.model.forward(&mut g, &batch, self.buffer, Positions::Last, None)?;
        if let Some(trace) = out.trace {
            for e in trace.entries {
                self.distances.push(e.distance_sq);
                self.rows.push(e.index);
            }
        }
        Ok(g.value(out.actions).data().to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub returns: Vec<f64>,
    pub scores: Vec<f64>,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_score: f64,
    pub std_score: f64,
    pub retrieval: RetrievalStats,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Scores a finished set of episodes against the environment's anchors.
pub fn summarize(spec: &EnvSpec, histories: &[EpisodeHistory], retrieval: RetrievalStats) -> Result<EvalResult> {
    let returns: Vec<f64> = histories.iter().map(|h| h.rewards.iter().sum()).collect();
    let scores = returns
        .iter()
        .map(|r| spec.normalized_score(*r))
        .collect::<Result<Vec<f64>>>()?;
    let (mean_return, std_return) = mean_std(&returns);
    let (mean_score, std_score) = mean_std(&scores);
    Ok(EvalResult {
        returns,
        scores,
        mean_return,
        std_return,
        mean_score,
        std_score,
        retrieval,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Initial return token as a multiple of the expert anchor return.
    pub target_multiplier: f64,
    pub seed: u64,
}

/// Rolls out `model` with `buffer` (reframe) and scores the episodes.
pub fn evaluate(
    model: &PolicyModel,
    stats: &NormStats,
    buffer: Option<&MemoryBuffer>,
    spec: &EnvSpec,
    cfg: &EvalConfig,
) -> Result<EvalResult> {
    let anchors = spec
        .anchors
        .ok_or_else(|| Error::State(format!("env `{}` has no anchors", spec.name)))?;
    let mut actor = PolicyActor::new(model, stats, buffer)?;
    let target = anchors.expert * cfg.target_multiplier;
    let hist = run_episodes(spec, cfg.episodes, cfg.seed, target, &mut actor)?;
    summarize(spec, &hist, actor.retrieval_stats())
}
