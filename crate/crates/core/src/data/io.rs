//! `RFDS` dataset files.
//!
//! Layout (little-endian): magic `RFDS`, version `u32`, env-spec block,
//! generation block (tier `u8`, seed `u64`, config hash string), stats block,
//! trajectory count `u64`, then per trajectory: `T u32`, episode seed `u64`,
//! tier `u8`, and the raw `f64` arrays in field order (observations, actions,
//! rewards). Returns-to-go are recomputed on load and never stored.

use std::path::Path;

use super::{NormStats, Trajectory, TrajectoryDataset};
use crate::binio::{Reader, Writer};
use crate::env::{Anchors, EnvSpec, Obstacle, TierKind, Variant};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RFDS";
pub const VERSION: u32 = 1;

pub fn write_env(w: &mut Writer, env: &EnvSpec) {
    w.str(&env.name);
    w.u8(env.variant.code());
    w.u32(env.obs_dim as u32);
    w.u32(env.act_dim as u32);
    w.u32(env.horizon as u32);
    w.u32(env.max_episode_len as u32);
    w.f64(env.dt);
    w.f64(env.action_cost);
    w.f64s(&env.action_low);
    w.f64s(&env.action_high);
    w.f64(env.arena_half_width);
    w.f64s(&env.goal);
    w.f64s(&env.init_low);
    w.f64s(&env.init_high);
    w.f64(env.init_speed);
    match env.obstacle {
        Some(o) => {
            w.u8(1);
            w.f64s(&o.center);
            w.f64(o.radius);
            w.f64(o.penalty);
        }
        None => w.u8(0),
    }
    match env.anchors {
        Some(a) => {
            w.u8(1);
            w.f64(a.random);
            w.f64(a.expert);
        }
        None => w.u8(0),
    }
}

fn pair(r: &mut Reader<'_>) -> Result<[f64; 2]> {
    Ok([r.f64()?, r.f64()?])
}

pub fn read_env(r: &mut Reader<'_>) -> Result<EnvSpec> {
    let name = r.str()?;
    let at = r.offset();
    let variant = Variant::from_code(r.u8()?).ok_or_else(|| Error::format(at, "unknown env variant"))?;
    let obs_dim = r.u32()? as usize;
    let act_dim = r.u32()? as usize;
    if obs_dim == 0 || act_dim == 0 || obs_dim > 1 << 16 || act_dim > 1 << 16 {
        return Err(r.err("implausible observation/action dims"));
    }
    let horizon = r.u32()? as usize;
    let max_episode_len = r.u32()? as usize;
    let dt = r.f64()?;
    let action_cost = r.f64()?;
    let action_low = r.f64s(act_dim)?;
    let action_high = r.f64s(act_dim)?;
    let arena_half_width = r.f64()?;
    let goal = pair(r)?;
    let init_low = pair(r)?;
    let init_high = pair(r)?;
    let init_speed = r.f64()?;
    let obstacle = match r.u8()? {
        0 => None,
        1 => Some(Obstacle {
            center: pair(r)?,
            radius: r.f64()?,
            penalty: r.f64()?,
        }),
        _ => return Err(r.err("bad obstacle flag")),
    };
    let anchors = match r.u8()? {
        0 => None,
        1 => Some(Anchors {
            random: r.f64()?,
            expert: r.f64()?,
        }),
        _ => return Err(r.err("bad anchors flag")),
    };
    Ok(EnvSpec {
        name,
        variant,
        obs_dim,
        act_dim,
        horizon,
        max_episode_len,
        dt,
        action_cost,
        action_low,
        action_high,
        arena_half_width,
        goal,
        init_low,
        init_high,
        init_speed,
        obstacle,
        anchors,
    })
}

pub fn write_stats(w: &mut Writer, s: &NormStats) {
    w.u32(s.obs_mean.len() as u32);
    w.f64s(&s.obs_mean);
    w.f64s(&s.obs_std);
    w.f64(s.return_scale);
}

pub fn read_stats(r: &mut Reader<'_>) -> Result<NormStats> {
    let d = r.u32()? as usize;
    if d > 1 << 16 {
        return Err(r.err("implausible stats width"));
    }
    Ok(NormStats {
        obs_mean: r.f64s(d)?,
        obs_std: r.f64s(d)?,
        return_scale: r.f64()?,
    })
}

pub fn encode(ds: &TrajectoryDataset) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    write_env(&mut w, &ds.env);
    w.u8(ds.tier.code());
    w.u64(ds.seed);
    w.str(&ds.config_hash);
    write_stats(&mut w, &ds.stats);
    w.u64(ds.trajectories.len() as u64);
    for t in &ds.trajectories {
        w.u32(t.len() as u32);
        w.u64(t.episode_seed);
        w.u8(t.tier.code());
        w.f64s(&t.observations);
        w.f64s(&t.actions);
        w.f64s(&t.rewards);
    }
    w.finish()
}

pub fn decode(bytes: &[u8]) -> Result<TrajectoryDataset> {
    let mut r = Reader::new(bytes);
    r.expect_magic(MAGIC)?;
    r.expect_version(VERSION)?;
    let env = read_env(&mut r)?;
    let at = r.offset();
    let tier = TierKind::from_code(r.u8()?).ok_or_else(|| Error::format(at, "unknown tier"))?;
    let seed = r.u64()?;
    let config_hash = r.str()?;
    let stats = read_stats(&mut r)?;
    if stats.obs_mean.len() != env.obs_dim {
        return Err(r.err("stats width disagrees with obs_dim"));
    }
    let count = r.u64()?;
    let mut trajectories = Vec::new();
    for _ in 0..count {
        let at = r.offset();
        let t = r.u32()? as usize;
        let episode_seed = r.u64()?;
        let tag = TierKind::from_code(r.u8()?).ok_or_else(|| r.err("unknown trajectory tier"))?;
        let obs = r.f64s(t * env.obs_dim)?;
        let act = r.f64s(t * env.act_dim)?;
        let rew = r.f64s(t)?;
        let traj = Trajectory::new(env.obs_dim, env.act_dim, obs, act, rew, tag, episode_seed)
            .map_err(|e| Error::format(at, format!("bad trajectory: {e}")))?;
        trajectories.push(traj);
    }
    r.expect_end()?;
    if trajectories.is_empty() {
        return Err(r.err("dataset holds no trajectories"));
    }
    Ok(TrajectoryDataset {
        env,
        tier,
        seed,
        config_hash,
        stats,
        trajectories,
    })
}

pub fn save(ds: &TrajectoryDataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode(ds))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrajectoryDataset> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode(&bytes)
}
