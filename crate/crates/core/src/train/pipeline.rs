//! Artifact-backed execution of the two training stages and evaluation.
//!
//! Shared intermediate results live in `root/stages/<kind>-<hash>/`, where the
//! hash covers only the keys (and upstream stage hashes) that stage depends
//! on. Arms that differ only downstream reuse the same directories; the swap
//! arm, for instance, evaluates the policy trained by the dataset-memory arm.
//! Each run writes `root/<config-hash>/{config.cfg, metrics.csv, summary.json}`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use serde::Serialize;

use super::config::{MemorySource, RunConfig};
use super::eval::{evaluate, EvalConfig, EvalResult, RetrievalStats};
use super::stage2::{dataset_loss, train_policy, PolicyTrainConfig, PolicyTrainReport};
use crate::amb::{reconstruction_error, train_autoencoder, AutoencoderModel, ComponentStats, MemoryBuffer};
use crate::binio::{sha256_hex, Reader, Writer};
use crate::data::{io as data_io, Trajectory, TrajectoryDataset};
use crate::env::{episode_seed, generate_dataset, EnvSpec, PolicyTier, TierKind};
use crate::error::{Error, Result};
use crate::nn::rng_from_seed;
use crate::policy::{PolicyCheckpoint, PolicyMode, PolicyModel};

pub const AE_MAGIC: &[u8; 4] = b"RFAE";
pub const AE_VERSION: u32 = 1;

/// Relative reconstruction error above which stage 1 records a warning.
pub const RECONSTRUCTION_BUDGET: f64 = 0.05;

pub const METRICS_HEADER: &str =
    "run_id,arm,variant,mode,train_source,eval_source,amb_size,seed,step,episodes,mean_return,std_return,mean_score,std_score";

/// Writes through a per-process temporary file and a rename, so readers never
/// see partial files even when several processes share a stage directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact");
    let tmp = path.with_file_name(format!(".{name}.{}.tmp", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

pub fn encode_autoencoder(model: &AutoencoderModel) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(AE_MAGIC);
    w.u32(AE_VERSION);
    model.write(&mut w);
    w.finish()
}

pub fn decode_autoencoder(bytes: &[u8]) -> Result<AutoencoderModel> {
    let mut r = Reader::new(bytes);
    r.expect_magic(AE_MAGIC)?;
    r.expect_version(AE_VERSION)?;
    let m = AutoencoderModel::read(&mut r)?;
    r.expect_end()?;
    Ok(m)
}

/// A stage directory keyed by the hash of its inputs.
#[derive(Clone, Debug)]
pub struct Stage {
    pub kind: &'static str,
    pub text: String,
    pub hash: String,
    pub dir: PathBuf,
}

impl Stage {
    fn new(root: &Path, kind: &'static str, cfg: &RunConfig, keys: &[&str], upstream: &[&Stage]) -> Self {
        let entries = cfg.entries();
        let mut text = format!("stage = {kind}\n");
        for u in upstream {
            let _ = writeln!(text, "upstream.{} = {}", u.kind, u.hash);
        }
        for key in keys {
            let (_, v) = entries
                .iter()
                .find(|(k, _)| k == key)
                .unwrap_or_else(|| panic!("stage key `{key}` is not a config key"));
            let _ = writeln!(text, "{key} = {v}");
        }
        let hash = sha256_hex(text.as_bytes());
        let dir = root.join("stages").join(format!("{kind}-{}", &hash[..16]));
        Self { kind, text, hash, dir }
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    fn prepare(&self) -> Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        write_atomic(&self.path("stage.cfg"), self.text.as_bytes())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Stage1Info {
    pub source: String,
    pub rows: usize,
    pub relative_error: [f64; 3],
    pub status: String,
    pub buffer_hash: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainInfo {
    pub steps: usize,
    pub loss_first: f64,
    pub loss_last: f64,
    pub retrieval_calls: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FinetuneInfo {
    pub steps: usize,
    pub expert_loss_before: f64,
    pub expert_loss_after: f64,
    pub dataset_loss_before: f64,
    pub dataset_loss_after: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub config_hash: String,
    pub arm: String,
    pub seed: u64,
    pub final_step: usize,
    pub final_mean_score: f64,
    pub final_mean_return: f64,
    pub final_returns: Vec<f64>,
    pub retrieval: RetrievalStats,
    pub train: Option<TrainInfo>,
    pub stage1: Option<Stage1Info>,
    pub finetune: Option<FinetuneInfo>,
    pub warnings: Vec<String>,
    pub wall_clock_secs: BTreeMap<String, f64>,
    pub artifacts: BTreeMap<String, String>,
}

/// One row of a run's metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub arm: String,
    pub variant: String,
    pub mode: String,
    pub train_source: String,
    pub eval_source: String,
    pub amb_size: usize,
    pub seed: u64,
    pub step: usize,
    pub episodes: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_score: f64,
    pub std_score: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.arm,
            self.variant,
            self.mode,
            self.train_source,
            self.eval_source,
            self.amb_size,
            self.seed,
            self.step,
            self.episodes,
            self.mean_return,
            self.std_return,
            self.mean_score,
            self.std_score
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 14 {
            return Err(Error::Argument(format!("metrics row has {} fields, expected 14", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse()
                .map_err(|_| Error::Argument(format!("bad number `{}` in metrics row", f[i])))
        };
        let int = |i: usize| -> Result<u64> {
            f[i].parse()
                .map_err(|_| Error::Argument(format!("bad integer `{}` in metrics row", f[i])))
        };
        Ok(Self {
            run_id: f[0].into(),
            arm: f[1].into(),
            variant: f[2].into(),
            mode: f[3].into(),
            train_source: f[4].into(),
            eval_source: f[5].into(),
            amb_size: int(6)? as usize,
            seed: int(7)?,
            step: int(8)? as usize,
            episodes: int(9)? as usize,
            mean_return: num(10)?,
            std_return: num(11)?,
            mean_score: num(12)?,
            std_score: num(13)?,
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    text.lines().skip(1).filter(|l| !l.is_empty()).map(MetricsRow::parse).collect()
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub rows: Vec<MetricsRow>,
    /// True when the run directory was already complete.
    pub skipped: bool,
}

impl RunOutcome {
    pub fn final_row(&self) -> &MetricsRow {
        self.rows.last().expect("runs record at least one evaluation")
    }
}

/// Stage orchestration rooted at an output directory.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub root: PathBuf,
    /// Create missing upstream artifacts instead of failing.
    pub auto: bool,
    pub verbose: bool,
}

const DATA_KEYS: &[&str] = &["env.variant", "data.tier", "data.size", "data.seed"];
const EXPERT_KEYS: &[&str] = &["env.variant", "data.expert_pool", "data.expert_seed"];
const AE_KEYS: &[&str] = &[
    "amb.size",
    "amb.seed",
    "ae.rtg_width",
    "ae.obs_width",
    "ae.act_width",
    "ae.latent",
    "ae.hidden",
    "ae.steps",
    "ae.batch",
    "ae.lr",
    "ae.weight_decay",
    "optim.log_every",
];
const POLICY_KEYS: &[&str] = &[
    "policy.mode",
    "ae.rtg_width",
    "ae.obs_width",
    "ae.latent",
    "policy.d_model",
    "policy.layers",
    "policy.heads",
    "policy.context",
    "policy.max_ep_len",
    "policy.dropout_hidden",
    "policy.dropout_attention",
    "policy.align_lambda",
    "policy.pin_correction",
    "optim.lr",
    "optim.beta1",
    "optim.beta2",
    "optim.eps",
    "optim.weight_decay",
    "optim.grad_clip",
    "optim.warmup",
    "optim.batch",
    "optim.steps",
    "optim.reference_steps",
    "optim.log_every",
    "eval.snapshots",
    "run.seed",
];
const FINETUNE_KEYS: &[&str] = &["finetune.steps", "amb.size"];

/// Step counts at which checkpoints are kept: `snapshots` evenly spaced
/// points ending at `steps` (just `steps` when `snapshots` is 0).
pub fn snapshot_steps(steps: usize, snapshots: usize) -> Vec<usize> {
    let s = snapshots.max(1);
    let mut v: Vec<usize> = (1..=s).map(|i| (i * steps + s / 2) / s).collect();
    v.dedup();
    v
}

impl Pipeline {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            auto: true,
            verbose: false,
        }
    }

    fn note(&self, msg: &str) {
        if self.verbose {
            eprintln!("{msg}");
        }
    }

    pub fn env(&self, cfg: &RunConfig) -> EnvSpec {
        EnvSpec::for_variant(cfg.variant)
    }

    pub fn data_stage(&self, cfg: &RunConfig) -> Stage {
        Stage::new(&self.root, "data", cfg, DATA_KEYS, &[])
    }

    pub fn expert_stage(&self, cfg: &RunConfig) -> Stage {
        Stage::new(&self.root, "expert", cfg, EXPERT_KEYS, &[])
    }

    /// Stage 1 for memory `source`; its trajectories come from the expert
    /// pool or the training dataset.
    pub fn stage1(&self, cfg: &RunConfig, source: MemorySource) -> Result<Stage> {
        let upstream = match source {
            MemorySource::Expert => self.expert_stage(cfg),
            MemorySource::Dataset => self.data_stage(cfg),
            MemorySource::None => return Err(Error::Config("no memory source".into())),
        };
        let mut c = cfg.clone();
        c.train_source = source;
        let keys: Vec<&str> = std::iter::once("amb.source").chain(AE_KEYS.iter().copied()).collect();
        Ok(Stage::new(&self.root, "stage1", &c, &keys, &[&upstream]))
    }

    pub fn policy_stage(&self, cfg: &RunConfig) -> Result<Stage> {
        let data = self.data_stage(cfg);
        let mut up = vec![data];
        if cfg.mode == PolicyMode::Reframe {
            up.push(self.stage1(cfg, cfg.train_source)?);
        }
        let refs: Vec<&Stage> = up.iter().collect();
        let mut base = cfg.clone();
        base.finetune_steps = 0;
        Ok(Stage::new(&self.root, "policy", &base, POLICY_KEYS, &refs))
    }

    pub fn finetune_stage(&self, cfg: &RunConfig) -> Result<Stage> {
        let policy = self.policy_stage(cfg)?;
        let expert = self.expert_stage(cfg);
        Ok(Stage::new(&self.root, "finetune", cfg, FINETUNE_KEYS, &[&policy, &expert]))
    }

    pub fn run_dir(&self, cfg: &RunConfig) -> PathBuf {
        self.root.join(cfg.short_hash())
    }

    fn load_dataset(&self, stage: &Stage, make: impl FnOnce() -> Result<TrajectoryDataset>) -> Result<TrajectoryDataset> {
        let path = stage.path("dataset.rfds");
        if path.exists() {
            return data_io::load(&path);
        }
        if !self.auto {
            return Err(Error::MissingArtifact(path));
        }
        let ds = make()?;
        stage.prepare()?;
        write_atomic(&path, &data_io::encode(&ds))?;
        Ok(ds)
    }

    /// Training dataset and expert pool, generated when absent.
    pub fn gen_data(&self, cfg: &RunConfig) -> Result<(TrajectoryDataset, TrajectoryDataset)> {
        let auto = Self { auto: true, ..self.clone() };
        Ok((auto.dataset(cfg)?, auto.expert_pool(cfg)?))
    }

    pub fn dataset(&self, cfg: &RunConfig) -> Result<TrajectoryDataset> {
        let stage = self.data_stage(cfg);
        self.load_dataset(&stage, || {
            self.note(&format!("generating {} {} trajectories", cfg.data_size, cfg.data_tier.as_str()));
            generate_dataset(&self.env(cfg), &PolicyTier::for_kind(cfg.data_tier), cfg.data_size, cfg.data_seed)
        })
    }

    pub fn expert_pool(&self, cfg: &RunConfig) -> Result<TrajectoryDataset> {
        let stage = self.expert_stage(cfg);
        self.load_dataset(&stage, || {
            generate_dataset(&self.env(cfg), &PolicyTier::for_kind(TierKind::Expert), cfg.expert_pool, cfg.expert_seed)
        })
    }

    /// Memory trajectories and their ids: the first `amb.size` experts, or a
    /// uniform draw without replacement from the training dataset.
    pub fn memory_trajectories(&self, cfg: &RunConfig, source: MemorySource) -> Result<(Vec<Trajectory>, Vec<u32>)> {
        match source {
            MemorySource::Expert => {
                let pool = self.expert_pool(cfg)?;
                let n = cfg.amb_size.min(pool.len());
                Ok((pool.trajectories[..n].to_vec(), (0..n as u32).collect()))
            }
            MemorySource::Dataset => {
                let ds = self.dataset(cfg)?;
                let mut rng = rng_from_seed(episode_seed(cfg.amb_seed, 0xDA7A));
                let mut idx = sample(&mut rng, ds.len(), cfg.amb_size.min(ds.len())).into_vec();
                idx.sort_unstable();
                Ok((
                    idx.iter().map(|&i| ds.trajectories[i].clone()).collect(),
                    idx.iter().map(|&i| i as u32).collect(),
                ))
            }
            MemorySource::None => Err(Error::Config("no memory source".into())),
        }
    }

    /// Trains and freezes the stage-1 autoencoder for `source`.
    pub fn train_ae(&self, cfg: &RunConfig, source: MemorySource) -> Result<AutoencoderModel> {
        let stage = self.stage1(cfg, source)?;
        let path = stage.path("ae.rfae");
        if path.exists() {
            return decode_autoencoder(&std::fs::read(&path)?);
        }
        let (trajs, _) = self.memory_trajectories(cfg, source)?;
        self.note(&format!("training autoencoder on {} {} trajectories", trajs.len(), source.as_str()));
        let spec = self.env(cfg);
        let stats = ComponentStats::compute(&trajs)?;
        let model = AutoencoderModel::new(cfg.ae, spec.obs_dim, spec.act_dim, stats, cfg.amb_seed)?;
        let (model, report) = train_autoencoder(model, &trajs, &cfg.ae_train_config())?;
        stage.prepare()?;
        let mut curve = String::from("step,rtg,obs,act\n");
        for p in &report.curve {
            let _ = writeln!(curve, "{},{},{},{}", p.step, p.losses.rtg, p.losses.obs, p.losses.act);
        }
        write_atomic(&stage.path("ae_curve.csv"), curve.as_bytes())?;
        write_atomic(&path, &encode_autoencoder(&model))?;
        Ok(model)
    }

    /// Builds the memory buffer of `source` from its trained autoencoder.
    pub fn build_amb(&self, cfg: &RunConfig, source: MemorySource) -> Result<MemoryBuffer> {
        let stage = self.stage1(cfg, source)?;
        let path = stage.path("amb.rfmb");
        if path.exists() {
            return MemoryBuffer::load(&path);
        }
        let ae_path = stage.path("ae.rfae");
        let model = if ae_path.exists() || self.auto {
            self.train_ae(cfg, source)?
        } else {
            return Err(Error::MissingArtifact(ae_path));
        };
        let (trajs, ids) = self.memory_trajectories(cfg, source)?;
        let rel = reconstruction_error(&model, &trajs)?.relative();
        let buffer_source = source.buffer_source().expect("memory source");
        let buffer = MemoryBuffer::build(&trajs, Some(&ids), model, buffer_source)?;
        let info = Stage1Info {
            source: source.as_str().into(),
            rows: buffer.len(),
            relative_error: rel,
            status: if rel.iter().all(|r| *r < RECONSTRUCTION_BUDGET) {
                "ok".into()
            } else {
                "warning: reconstruction budget unmet".into()
            },
            buffer_hash: buffer.hash(),
        };
        stage.prepare()?;
        write_atomic(&stage.path("stage1.json"), serde_json::to_string_pretty(&info).unwrap().as_bytes())?;
        write_atomic(&path, &buffer.encode())?;
        Ok(buffer)
    }

    /// The buffer for `source`, built on demand when `auto` is set.
    pub fn buffer(&self, cfg: &RunConfig, source: MemorySource) -> Result<MemoryBuffer> {
        let stage = self.stage1(cfg, source)?;
        let path = stage.path("amb.rfmb");
        if !path.exists() && !self.auto {
            return Err(Error::MissingArtifact(path));
        }
        self.build_amb(cfg, source)
    }

    pub fn stage1_info(&self, cfg: &RunConfig, source: MemorySource) -> Result<Option<Stage1Info>> {
        let path = self.stage1(cfg, source)?.path("stage1.json");
        if !path.exists() {
            return Ok(None);
        }
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Argument(format!("stage1.json: {e}")))?;
        Ok(Some(Stage1Info {
            source: v["source"].as_str().unwrap_or_default().into(),
            rows: v["rows"].as_u64().unwrap_or(0) as usize,
            relative_error: [0, 1, 2].map(|i| v["relative_error"][i].as_f64().unwrap_or(f64::NAN)),
            status: v["status"].as_str().unwrap_or_default().into(),
            buffer_hash: v["buffer_hash"].as_str().unwrap_or_default().into(),
        }))
    }

    fn policy_train_config(cfg: &RunConfig, steps: usize, salt: u64) -> PolicyTrainConfig {
        PolicyTrainConfig {
            optim: cfg.optim,
            batch: cfg.batch,
            steps,
            log_every: cfg.log_every,
            pin_correction: cfg.pin_correction,
            seed: episode_seed(cfg.seed, salt),
        }
    }

    /// Trains and saves snapshot checkpoints; returns the report.
    #[allow(clippy::too_many_arguments)]
    fn train_and_snapshot(
        &self,
        stage: &Stage,
        cfg: &RunConfig,
        mut model: PolicyModel,
        trajs: &[Trajectory],
        stats: &crate::data::NormStats,
        buffer: Option<&MemoryBuffer>,
        tcfg: &PolicyTrainConfig,
    ) -> Result<PolicyTrainReport> {
        stage.prepare()?;
        let snaps = snapshot_steps(tcfg.steps, cfg.eval_snapshots);
        let config_hash = cfg.hash();
        let buffer_hash = buffer.map(|b| b.hash());
        let save = |step: usize, m: &PolicyModel| -> Result<()> {
            let ck = PolicyCheckpoint {
                model: m.clone(),
                stats: stats.clone(),
                config_hash: config_hash.clone(),
                buffer_hash: buffer_hash.clone(),
            };
            write_atomic(&stage.path(&format!("snapshot-{step}.rfpc")), &ck.encode())
        };
        if tcfg.steps == 0 {
            save(0, &model)?;
        }
        let report = train_policy(&mut model, trajs, stats, buffer, tcfg, |step, m| {
            if snaps.contains(&step) {
                save(step, m)?;
            }
            Ok(())
        })?;
        let mut loss = String::from("step,total,action,align\n");
        for p in &report.curve {
            let _ = writeln!(loss, "{},{},{},{}", p.step, p.total, p.action, p.align);
        }
        write_atomic(&stage.path("loss.csv"), loss.as_bytes())?;
        let (first, last) = report.head_tail_means(1000).unwrap_or((f64::NAN, f64::NAN));
        let info = TrainInfo {
            steps: tcfg.steps,
            loss_first: first,
            loss_last: last,
            retrieval_calls: report.retrieval_calls,
        };
        write_atomic(&stage.path("train.json"), serde_json::to_string_pretty(&info).unwrap().as_bytes())?;
        let ck = PolicyCheckpoint {
            model,
            stats: stats.clone(),
            config_hash,
            buffer_hash,
        };
        write_atomic(&stage.path("policy.rfpc"), &ck.encode())?;
        Ok(report)
    }

    /// Stage 2: trains the policy on the training dataset.
    pub fn train_stage2(&self, cfg: &RunConfig) -> Result<PathBuf> {
        cfg.validate()?;
        let stage = self.policy_stage(cfg)?;
        let out = stage.path("policy.rfpc");
        if out.exists() {
            return Ok(out);
        }
        let ds = self.dataset(cfg)?;
        let buffer = match cfg.mode {
            PolicyMode::Reframe => Some(self.buffer(cfg, cfg.train_source)?),
            PolicyMode::BaselineDt => None,
        };
        let spec = self.env(cfg);
        let mut policy = PolicyModel::new(
            cfg.policy,
            cfg.mode,
            &cfg.ae,
            spec.action_low.clone(),
            spec.action_high.clone(),
            spec.obs_dim,
            episode_seed(cfg.seed, 0x1417),
        )?;
        if let Some(buf) = &buffer {
            policy.init_query_from(buf)?;
        }
        self.note(&format!("training {} policy, seed {}", cfg.mode.as_str(), cfg.seed));
        let tcfg = Self::policy_train_config(cfg, cfg.steps, 0x7EA1);
        self.train_and_snapshot(&stage, cfg, policy, &ds.trajectories, &ds.stats, buffer.as_ref(), &tcfg)?;
        Ok(out)
    }

    /// Continues the same-seed baseline on the memory's expert trajectories.
    pub fn finetune(&self, cfg: &RunConfig) -> Result<PathBuf> {
        cfg.validate()?;
        if cfg.mode != PolicyMode::BaselineDt {
            return Err(Error::Config("fine-tuning starts from a baseline_dt checkpoint".into()));
        }
        let stage = self.finetune_stage(cfg)?;
        let out = stage.path("policy.rfpc");
        if out.exists() {
            return Ok(out);
        }
        let base_path = self.policy_stage(cfg)?.path("policy.rfpc");
        if !base_path.exists() {
            if self.auto {
                self.train_stage2(cfg)?;
            } else {
                return Err(Error::MissingArtifact(base_path));
            }
        }
        let base = PolicyCheckpoint::load(&base_path)?;
        let pool = self.expert_pool(cfg)?;
        let n = cfg.amb_size.min(pool.len());
        if n == 0 {
            return Err(Error::Argument("fine-tuning needs at least one expert trajectory".into()));
        }
        let experts = &pool.trajectories[..n];
        let ds = self.dataset(cfg)?;
        let probe = &ds.trajectories[..ds.len().min(500)];
        let before_e = dataset_loss(&base.model, experts, &base.stats, None, 1)?;
        let before_d = dataset_loss(&base.model, probe, &base.stats, None, 10)?;
        self.note(&format!("fine-tuning baseline seed {} on {n} experts", cfg.seed));
        let tcfg = Self::policy_train_config(cfg, cfg.finetune_steps, 0xF17E);
        self.train_and_snapshot(&stage, cfg, base.model.clone(), experts, &base.stats, None, &tcfg)?;
        let tuned = PolicyCheckpoint::load(&out)?;
        let info = FinetuneInfo {
            steps: cfg.finetune_steps,
            expert_loss_before: before_e,
            expert_loss_after: dataset_loss(&tuned.model, experts, &tuned.stats, None, 1)?,
            dataset_loss_before: before_d,
            dataset_loss_after: dataset_loss(&tuned.model, probe, &tuned.stats, None, 10)?,
        };
        write_atomic(&stage.path("finetune.json"), serde_json::to_string_pretty(&info).unwrap().as_bytes())?;
        Ok(out)
    }

    /// The stage whose checkpoints this run evaluates.
    pub fn checkpoint_stage(&self, cfg: &RunConfig) -> Result<Stage> {
        if cfg.finetune_steps > 0 {
            self.finetune_stage(cfg)
        } else {
            self.policy_stage(cfg)
        }
    }

    /// Episode seed base shared by every arm with the same run seed.
    pub fn eval_config(cfg: &RunConfig) -> EvalConfig {
        EvalConfig {
            episodes: cfg.eval_episodes,
            target_multiplier: cfg.target_multiplier,
            seed: episode_seed(cfg.eval_seed, cfg.seed),
        }
    }

    /// Evaluates every snapshot of the run's checkpoint stage with the eval
    /// buffer and writes the run directory.
    pub fn evaluate_run(&self, cfg: &RunConfig) -> Result<RunOutcome> {
        cfg.validate()?;
        let started = Instant::now();
        let stage = self.checkpoint_stage(cfg)?;
        let final_path = stage.path("policy.rfpc");
        require(&final_path)?;
        let buffer = match cfg.mode {
            PolicyMode::Reframe => Some(self.buffer(cfg, cfg.eval_source)?),
            PolicyMode::BaselineDt => None,
        };
        let spec = self.env(cfg);
        let ecfg = Self::eval_config(cfg);
        let steps = if cfg.finetune_steps > 0 { cfg.finetune_steps } else { cfg.steps };
        let mut rows = Vec::new();
        let mut last: Option<(usize, EvalResult)> = None;
        let mut warnings = Vec::new();
        for step in snapshot_steps(steps, cfg.eval_snapshots) {
            let path = stage.path(&format!("snapshot-{step}.rfpc"));
            let ck = PolicyCheckpoint::load(&path)?;
            if let (Some(buf), Some(h)) = (&buffer, &ck.buffer_hash) {
                let eh = buf.hash();
                if &eh != h && warnings.is_empty() {
                    warnings.push(format!(
                        "evaluation buffer {} differs from training buffer {}",
                        &eh[..16],
                        &h[..16]
                    ));
                }
            }
            let res = evaluate(&ck.model, &ck.stats, buffer.as_ref(), &spec, &ecfg)?;
            rows.push(MetricsRow {
                run_id: cfg.short_hash(),
                arm: cfg.arm.clone(),
                variant: cfg.variant.as_str().into(),
                mode: cfg.mode.as_str().into(),
                train_source: cfg.train_source.as_str().into(),
                eval_source: cfg.eval_source.as_str().into(),
                amb_size: cfg.amb_size,
                seed: cfg.seed,
                step,
                episodes: cfg.eval_episodes,
                mean_return: res.mean_return,
                std_return: res.std_return,
                mean_score: res.mean_score,
                std_score: res.std_score,
            });
            last = Some((step, res));
        }
        let (final_step, res) = last.expect("at least one snapshot");
        for w in &warnings {
            self.note(&format!("warning: {w}"));
        }

        let dir = self.run_dir(cfg);
        std::fs::create_dir_all(&dir)?;
        let mut csv = format!("{METRICS_HEADER}\n");
        for r in &rows {
            csv.push_str(&r.to_csv());
            csv.push('\n');
        }
        let train = {
            let p = self.policy_stage(cfg)?.path("train.json");
            read_train_info(&p)?
        };
        let finetune = if cfg.finetune_steps > 0 {
            let p = stage.path("finetune.json");
            if p.exists() {
                let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p)?)
                    .map_err(|e| Error::Argument(format!("finetune.json: {e}")))?;
                let g = |k: &str| v[k].as_f64().unwrap_or(f64::NAN);
                Some(FinetuneInfo {
                    steps: cfg.finetune_steps,
                    expert_loss_before: g("expert_loss_before"),
                    expert_loss_after: g("expert_loss_after"),
                    dataset_loss_before: g("dataset_loss_before"),
                    dataset_loss_after: g("dataset_loss_after"),
                })
            } else {
                None
            }
        } else {
            None
        };
        let stage1 = match cfg.mode {
            PolicyMode::Reframe => self.stage1_info(cfg, cfg.train_source)?,
            PolicyMode::BaselineDt => None,
        };
        if let Some(s) = &stage1 {
            if s.status != "ok" {
                warnings.push(s.status.clone());
            }
        }
        let mut artifacts = BTreeMap::new();
        artifacts.insert("checkpoint".into(), final_path.display().to_string());
        if cfg.mode == PolicyMode::Reframe {
            artifacts.insert(
                "train_buffer".into(),
                self.stage1(cfg, cfg.train_source)?.path("amb.rfmb").display().to_string(),
            );
            artifacts.insert(
                "eval_buffer".into(),
                self.stage1(cfg, cfg.eval_source)?.path("amb.rfmb").display().to_string(),
            );
        }
        let mut wall = BTreeMap::new();
        wall.insert("evaluation".into(), started.elapsed().as_secs_f64());
        let summary = RunSummary {
            run_id: cfg.short_hash(),
            config_hash: cfg.hash(),
            arm: cfg.arm.clone(),
            seed: cfg.seed,
            final_step,
            final_mean_score: res.mean_score,
            final_mean_return: res.mean_return,
            final_returns: res.returns.clone(),
            retrieval: res.retrieval.clone(),
            train,
            stage1,
            finetune,
            warnings,
            wall_clock_secs: wall,
            artifacts,
        };
        write_atomic(&dir.join("metrics.csv"), csv.as_bytes())?;
        write_atomic(
            &dir.join("summary.json"),
            serde_json::to_string_pretty(&summary).unwrap().as_bytes(),
        )?;
        // Written last: a run directory counts as complete once this matches.
        write_atomic(&dir.join("config.cfg"), cfg.to_text().as_bytes())?;
        Ok(RunOutcome {
            dir,
            rows,
            skipped: false,
        })
    }

    /// True when the run directory holds this exact config and its outputs.
    pub fn is_complete(&self, cfg: &RunConfig) -> bool {
        let dir = self.run_dir(cfg);
        let cfg_ok = std::fs::read_to_string(dir.join("config.cfg")).is_ok_and(|t| t == cfg.to_text());
        cfg_ok && dir.join("metrics.csv").exists() && dir.join("summary.json").exists()
    }

    /// Runs every missing stage for `cfg`, then evaluates. Complete runs are
    /// loaded from disk instead.
    pub fn run(&self, cfg: &RunConfig) -> Result<RunOutcome> {
        cfg.validate()?;
        if self.is_complete(cfg) {
            let dir = self.run_dir(cfg);
            let rows = read_metrics(&dir.join("metrics.csv"))?;
            return Ok(RunOutcome { dir, rows, skipped: true });
        }
        let auto = Self { auto: true, ..self.clone() };
        if cfg.finetune_steps > 0 {
            auto.finetune(cfg)?;
        } else {
            auto.train_stage2(cfg)?;
        }
        if cfg.mode == PolicyMode::Reframe {
            auto.buffer(cfg, cfg.eval_source)?;
        }
        auto.evaluate_run(cfg)
    }
}

fn read_train_info(path: &Path) -> Result<Option<TrainInfo>> {
    if !path.exists() {
        return Ok(None);
    }
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)
        .map_err(|e| Error::Argument(format!("train.json: {e}")))?;
    Ok(Some(TrainInfo {
        steps: v["steps"].as_u64().unwrap_or(0) as usize,
        loss_first: v["loss_first"].as_f64().unwrap_or(f64::NAN),
        loss_last: v["loss_last"].as_f64().unwrap_or(f64::NAN),
        retrieval_calls: v["retrieval_calls"].as_u64().unwrap_or(0),
    }))
}
