//! Flat `key = value` run configuration with `[section]` headers.
//!
//! Every field has a dotted key (`section.name`). The canonical text lists all
//! keys in a fixed order with their resolved values, and the config hash is
//! the SHA-256 of that text, so any differing field yields a different hash.

use std::fmt::Write as _;
use std::path::Path;

use crate::amb::{AeConfig, AeTrainConfig, BufferSource};
use crate::binio::sha256_hex;
use crate::env::{TierKind, Variant};
use crate::error::{Error, Result};
use crate::nn::{AdamWConfig, DropoutRates};
use crate::policy::{PolicyConfig, PolicyMode};

/// Memory source of one stage, or no memory at all.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MemorySource {
    None,
    Expert,
    Dataset,
}

impl MemorySource {
    pub fn as_str(self) -> &'static str {
        match self {
            MemorySource::None => "none",
            MemorySource::Expert => "expert",
            MemorySource::Dataset => "dataset",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MemorySource::None),
            "expert" => Ok(MemorySource::Expert),
            "dataset" => Ok(MemorySource::Dataset),
            _ => Err(Error::Config(format!("unknown memory source `{s}` (none|expert|dataset)"))),
        }
    }

    pub fn buffer_source(self) -> Option<BufferSource> {
        match self {
            MemorySource::None => None,
            MemorySource::Expert => Some(BufferSource::Expert),
            MemorySource::Dataset => Some(BufferSource::Dataset),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub data_tier: TierKind,
    pub data_size: usize,
    pub data_seed: u64,
    /// Expert trajectories generated for memories and fine-tuning; a memory
    /// of size `n` uses the first `n`.
    pub expert_pool: usize,
    pub expert_seed: u64,

    pub train_source: MemorySource,
    pub eval_source: MemorySource,
    pub amb_size: usize,
    /// Seeds the autoencoder and the dataset-memory draw. Kept apart from the
    /// run seed so policy seeds share one stage-1 result.
    pub amb_seed: u64,

    pub ae: AeConfig,
    pub ae_steps: usize,
    pub ae_batch: usize,
    pub ae_lr: f64,
    pub ae_weight_decay: f64,

    pub mode: PolicyMode,
    pub policy: PolicyConfig,
    /// Keep `W_a, b_a` at their initial zeros.
    pub pin_correction: bool,

    pub optim: AdamWConfig,
    pub batch: usize,
    pub steps: usize,
    /// Step budget of the full-scale schedule these steps stand in for.
    pub reference_steps: usize,
    pub log_every: usize,

    pub finetune_steps: usize,

    pub eval_episodes: usize,
    pub eval_snapshots: usize,
    pub target_multiplier: f64,
    pub eval_seed: u64,

    pub seed: u64,
    pub arm: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PolicyConfig::default();
        Self {
            variant: Variant::PointMass,
            data_tier: TierKind::Medium,
            data_size: 6000,
            data_seed: 0,
            expert_pool: 60,
            expert_seed: 1,
            train_source: MemorySource::Expert,
            eval_source: MemorySource::Expert,
            amb_size: 60,
            amb_seed: 0,
            ae: AeConfig::default(),
            ae_steps: 20_000,
            ae_batch: 256,
            ae_lr: 1e-3,
            ae_weight_decay: 0.0,
            mode: PolicyMode::Reframe,
            policy: p,
            pin_correction: false,
            optim: AdamWConfig::default(),
            batch: 50,
            steps: 50_000,
            reference_steps: 500_000,
            log_every: 100,
            finetune_steps: 0,
            eval_episodes: 20,
            eval_snapshots: 10,
            target_multiplier: 1.0,
            eval_seed: 1000,
            seed: 0,
            arm: "custom".into(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{v}` for `{key}` (true|false)"))),
    }
}

/// Shortest round-trip representation, so parse(format(x)) == x.
fn f(v: f64) -> String {
    format!("{v:?}")
}

impl RunConfig {
    /// Every key in canonical order with its current value.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let p = &self.policy;
        let o = &self.optim;
        vec![
            ("env.variant", self.variant.as_str().into()),
            ("data.tier", self.data_tier.as_str().into()),
            ("data.size", self.data_size.to_string()),
            ("data.seed", self.data_seed.to_string()),
            ("data.expert_pool", self.expert_pool.to_string()),
            ("data.expert_seed", self.expert_seed.to_string()),
            ("amb.source", self.train_source.as_str().into()),
            ("amb.eval_source", self.eval_source.as_str().into()),
            ("amb.size", self.amb_size.to_string()),
            ("amb.seed", self.amb_seed.to_string()),
            ("ae.rtg_width", self.ae.rtg_width.to_string()),
            ("ae.obs_width", self.ae.obs_width.to_string()),
            ("ae.act_width", self.ae.act_width.to_string()),
            ("ae.latent", self.ae.latent.to_string()),
            ("ae.hidden", self.ae.hidden.to_string()),
            ("ae.steps", self.ae_steps.to_string()),
            ("ae.batch", self.ae_batch.to_string()),
            ("ae.lr", f(self.ae_lr)),
            ("ae.weight_decay", f(self.ae_weight_decay)),
            ("policy.mode", self.mode.as_str().into()),
            ("policy.d_model", p.d_model.to_string()),
            ("policy.layers", p.layers.to_string()),
            ("policy.heads", p.heads.to_string()),
            ("policy.context", p.context.to_string()),
            ("policy.max_ep_len", p.max_ep_len.to_string()),
            ("policy.dropout_hidden", f(p.dropout.hidden)),
            ("policy.dropout_attention", f(p.dropout.attention)),
            ("policy.align_lambda", f(p.align_lambda)),
            ("policy.pin_correction", self.pin_correction.to_string()),
            ("optim.lr", f(o.lr)),
            ("optim.beta1", f(o.betas.0)),
            ("optim.beta2", f(o.betas.1)),
            ("optim.eps", f(o.eps)),
            ("optim.weight_decay", f(o.weight_decay)),
            ("optim.grad_clip", f(o.grad_clip)),
            ("optim.warmup", o.warmup_steps.to_string()),
            ("optim.batch", self.batch.to_string()),
            ("optim.steps", self.steps.to_string()),
            ("optim.reference_steps", self.reference_steps.to_string()),
            ("optim.log_every", self.log_every.to_string()),
            ("finetune.steps", self.finetune_steps.to_string()),
            ("eval.episodes", self.eval_episodes.to_string()),
            ("eval.snapshots", self.eval_snapshots.to_string()),
            ("eval.target_multiplier", f(self.target_multiplier)),
            ("eval.seed", self.eval_seed.to_string()),
            ("run.seed", self.seed.to_string()),
            ("run.arm", self.arm.clone()),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        Self::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    /// Sets one dotted key. Unknown keys fail with [`Error::UnknownKey`].
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        let p = &mut self.policy;
        let o = &mut self.optim;
        match key {
            "env.variant" => self.variant = Variant::parse(v)?,
            "data.tier" => self.data_tier = TierKind::parse(v)?,
            "data.size" => self.data_size = parse_num(key, v)?,
            "data.seed" => self.data_seed = parse_num(key, v)?,
            "data.expert_pool" => self.expert_pool = parse_num(key, v)?,
            "data.expert_seed" => self.expert_seed = parse_num(key, v)?,
            "amb.source" => self.train_source = MemorySource::parse(v)?,
            "amb.eval_source" => self.eval_source = MemorySource::parse(v)?,
            "amb.size" => self.amb_size = parse_num(key, v)?,
            "amb.seed" => self.amb_seed = parse_num(key, v)?,
            "ae.rtg_width" => self.ae.rtg_width = parse_num(key, v)?,
            "ae.obs_width" => self.ae.obs_width = parse_num(key, v)?,
            "ae.act_width" => self.ae.act_width = parse_num(key, v)?,
            "ae.latent" => self.ae.latent = parse_num(key, v)?,
            "ae.hidden" => self.ae.hidden = parse_num(key, v)?,
            "ae.steps" => self.ae_steps = parse_num(key, v)?,
            "ae.batch" => self.ae_batch = parse_num(key, v)?,
            "ae.lr" => self.ae_lr = parse_num(key, v)?,
            "ae.weight_decay" => self.ae_weight_decay = parse_num(key, v)?,
            "policy.mode" => self.mode = PolicyMode::parse(v)?,
            "policy.d_model" => p.d_model = parse_num(key, v)?,
            "policy.layers" => p.layers = parse_num(key, v)?,
            "policy.heads" => p.heads = parse_num(key, v)?,
            "policy.context" => p.context = parse_num(key, v)?,
            "policy.max_ep_len" => p.max_ep_len = parse_num(key, v)?,
            "policy.dropout_hidden" => p.dropout.hidden = parse_num(key, v)?,
            "policy.dropout_attention" => p.dropout.attention = parse_num(key, v)?,
            "policy.align_lambda" => p.align_lambda = parse_num(key, v)?,
            "policy.pin_correction" => self.pin_correction = parse_bool(key, v)?,
            "optim.lr" => o.lr = parse_num(key, v)?,
            "optim.beta1" => o.betas.0 = parse_num(key, v)?,
            "optim.beta2" => o.betas.1 = parse_num(key, v)?,
            "optim.eps" => o.eps = parse_num(key, v)?,
            "optim.weight_decay" => o.weight_decay = parse_num(key, v)?,
            "optim.grad_clip" => o.grad_clip = parse_num(key, v)?,
            "optim.warmup" => o.warmup_steps = parse_num(key, v)?,
            "optim.batch" => self.batch = parse_num(key, v)?,
            "optim.steps" => self.steps = parse_num(key, v)?,
            "optim.reference_steps" => self.reference_steps = parse_num(key, v)?,
            "optim.log_every" => self.log_every = parse_num(key, v)?,
            "finetune.steps" => self.finetune_steps = parse_num(key, v)?,
            "eval.episodes" => self.eval_episodes = parse_num(key, v)?,
            "eval.snapshots" => self.eval_snapshots = parse_num(key, v)?,
            "eval.target_multiplier" => self.target_multiplier = parse_num(key, v)?,
            "eval.seed" => self.eval_seed = parse_num(key, v)?,
            "run.seed" => self.seed = parse_num(key, v)?,
            "run.arm" => {
                if v.is_empty() || v.chars().any(|c| c.is_whitespace() || c == ',') {
                    return Err(Error::Config(format!("invalid arm label `{v}`")));
                }
                self.arm = v.to_string()
            }
            _ => {
                return Err(Error::UnknownKey {
                    key: key.to_string(),
                    valid: Self::keys().join(", "),
                })
            }
        }
        Ok(())
    }

    /// Applies `KEY=VALUE` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Parses config text on top of the defaults. Keys inside a `[section]`
    /// may omit the section prefix; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            let key = if k.contains('.') || section.is_empty() {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            cfg.set(&key, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::parse(&text)
    }

    /// Canonical sectioned text of every resolved field.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (key, value) in self.entries() {
            let (section, name) = key.split_once('.').expect("dotted key");
            if section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{section}]");
                current = section;
            }
            let _ = writeln!(out, "{name} = {value}");
        }
        out
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }

    /// First 16 hex digits of [`RunConfig::hash`], used for directory names.
    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }

    pub fn validate(&self) -> Result<()> {
        self.ae.validate()?;
        self.policy.validate()?;
        self.optim.validate()?;
        if self.data_size == 0 || self.expert_pool == 0 {
            return Err(Error::Config("data.size and data.expert_pool must be >= 1".into()));
        }
        if self.batch == 0 || self.log_every == 0 || self.ae_batch == 0 {
            return Err(Error::Config("batch sizes and log_every must be >= 1".into()));
        }
        if self.eval_episodes == 0 {
            return Err(Error::Config("eval.episodes must be >= 1".into()));
        }
        if !(self.target_multiplier.is_finite()) {
            return Err(Error::Config("eval.target_multiplier must be finite".into()));
        }
        match self.mode {
            PolicyMode::BaselineDt => {
                if self.train_source != MemorySource::None || self.eval_source != MemorySource::None {
                    return Err(Error::Config(
                        "baseline_dt runs take no memory: set amb.source and amb.eval_source to none".into(),
                    ));
                }
            }
            PolicyMode::Reframe => {
                if self.train_source == MemorySource::None || self.eval_source == MemorySource::None {
                    return Err(Error::Config("reframe runs need amb.source and amb.eval_source".into()));
                }
                if self.finetune_steps > 0 {
                    return Err(Error::Config("fine-tuning applies to baseline_dt runs only".into()));
                }
            }
        }
        let uses = |s: MemorySource| self.train_source == s || self.eval_source == s;
        if self.amb_size == 0 && self.mode == PolicyMode::Reframe {
            return Err(Error::Config("amb.size must be >= 1".into()));
        }
        if uses(MemorySource::Expert) && self.amb_size > self.expert_pool {
            return Err(Error::Config(format!(
                "amb.size {} exceeds the expert pool of {}",
                self.amb_size, self.expert_pool
            )));
        }
        if uses(MemorySource::Dataset) && self.amb_size > self.data_size {
            return Err(Error::Config("amb.size exceeds data.size".into()));
        }
        if self.finetune_steps > 0 && self.amb_size > self.expert_pool {
            return Err(Error::Config("fine-tuning set exceeds the expert pool".into()));
        }
        Ok(())
    }

    pub fn is_swap(&self) -> bool {
        self.train_source != self.eval_source
    }

    pub fn dropout(&self) -> DropoutRates {
        self.policy.dropout
    }

    pub fn ae_train_config(&self) -> AeTrainConfig {
        AeTrainConfig {
            steps: self.ae_steps,
            batch: self.ae_batch,
            optim: AdamWConfig {
                lr: self.ae_lr,
                weight_decay: self.ae_weight_decay,
                ..AdamWConfig::default()
            },
            seed: self.amb_seed,
            log_every: self.log_every,
        }
    }
}
