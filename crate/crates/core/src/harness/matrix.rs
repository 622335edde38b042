use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::train::{read_metrics, write_atomic, MetricsRow, Pipeline, RunConfig, METRICS_HEADER};

pub const BASELINE_DT: &str = "baseline_dt";
pub const FINETUNED_DT: &str = "finetuned_dt";
pub const REFRAME_EXPERT: &str = "reframe_expert";
pub const REFRAME_SWAP_EVAL: &str = "reframe_swap_eval";
pub const REFRAME_DATASET_AMB: &str = "reframe_dataset_amb";

/// Arm names in execution order: every arm runs after the arms whose stages
/// it reuses.
pub const ARMS: [&str; 5] = [BASELINE_DT, REFRAME_EXPERT, REFRAME_DATASET_AMB, FINETUNED_DT, REFRAME_SWAP_EVAL];
pub const SIZES: [usize; 3] = [60, 45, 30];
pub const SEEDS: [u64; 3] = [0, 1, 2];

/// A named override set on the base config.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub name: String,
    pub overrides: Vec<String>,
    /// Whether the arm is repeated over every memory size.
    pub sized: bool,
}

impl Arm {
    /// One of the five standard arms. The fine-tuned arm continues the
    /// baseline for `finetune_steps` on the first `amb.size` experts.
    pub fn standard(name: &str, finetune_steps: usize) -> Result<Self> {
        let no_memory = ["policy.mode=baseline_dt", "amb.source=none", "amb.eval_source=none"];
        let memory = |train: &str, eval: &str| {
            vec![
                "policy.mode=reframe".to_string(),
                format!("amb.source={train}"),
                format!("amb.eval_source={eval}"),
                "finetune.steps=0".to_string(),
            ]
        };
        let (overrides, sized) = match name {
            BASELINE_DT => (
                no_memory.iter().map(|s| s.to_string()).chain(["finetune.steps=0".into()]).collect(),
                false,
            ),
            FINETUNED_DT => (
                no_memory
                    .iter()
                    .map(|s| s.to_string())
                    .chain([format!("finetune.steps={finetune_steps}")])
                    .collect(),
                false,
            ),
            REFRAME_EXPERT => (memory("expert", "expert"), true),
            REFRAME_SWAP_EVAL => (memory("dataset", "expert"), true),
            REFRAME_DATASET_AMB => (memory("dataset", "dataset"), true),
            _ => {
                return Err(Error::Argument(format!(
                    "unknown arm `{name}`; valid arms: {}",
                    ARMS.join(", ")
                )))
            }
        };
        Ok(Self {
            name: name.into(),
            overrides,
            sized,
        })
    }
}

/// Arms crossed with memory sizes (sized arms only) and seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationMatrix {
    pub arms: Vec<Arm>,
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl AblationMatrix {
    /// The five standard arms; fine-tuning runs for a tenth of the stage-2
    /// budget unless `finetune_steps` is given.
    pub fn standard(base: &RunConfig, finetune_steps: Option<usize>) -> Self {
        let ft = finetune_steps.unwrap_or((base.steps / 10).max(1));
        Self {
            arms: ARMS.iter().map(|a| Arm::standard(a, ft).expect("standard arm")).collect(),
            sizes: SIZES.to_vec(),
            seeds: SEEDS.to_vec(),
        }
    }

    /// Keeps only the named arms, in the standard order.
    pub fn select(mut self, names: &[String]) -> Result<Self> {
        for n in names {
            if !ARMS.contains(&n.as_str()) {
                return Err(Error::Argument(format!("unknown arm `{n}`; valid arms: {}", ARMS.join(", "))));
            }
        }
        self.arms.retain(|a| names.iter().any(|n| *n == a.name));
        Ok(self)
    }

    pub fn expected_runs(&self) -> usize {
        self.arms
            .iter()
            .map(|a| if a.sized { self.sizes.len() } else { 1 } * self.seeds.len())
            .sum()
    }

    /// Resolved configs in execution order. Unsized arms keep the base
    /// `amb.size`. Fails when two runs would share a hash.
    pub fn expand(&self, base: &RunConfig) -> Result<Vec<RunConfig>> {
        let mut out = Vec::with_capacity(self.expected_runs());
        for arm in &self.arms {
            let sizes: Vec<Option<usize>> = if arm.sized {
                self.sizes.iter().copied().map(Some).collect()
            } else {
                vec![None]
            };
            for size in sizes {
                for &seed in &self.seeds {
                    let mut c = base.clone();
                    c.apply_overrides(&arm.overrides)?;
                    if let Some(s) = size {
                        c.amb_size = s;
                    }
                    c.seed = seed;
                    c.arm = arm.name.clone();
                    c.validate()?;
                    out.push(c);
                }
            }
        }
        let hashes: BTreeSet<String> = out.iter().map(|c| c.hash()).collect();
        if hashes.len() != out.len() {
            return Err(Error::Config("ablation matrix expands to duplicate configs".into()));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ManifestEntry {
    pub run_id: String,
    pub arm: String,
    pub amb_size: usize,
    pub seed: u64,
    pub status: String,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Manifest {
    pub expected_runs: usize,
    pub completed: usize,
    pub failed: usize,
    pub runs: Vec<ManifestEntry>,
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub dir: PathBuf,
    pub manifest: Manifest,
    /// Every metrics row of the completed runs, in matrix order.
    pub rows: Vec<MetricsRow>,
    /// Runs loaded from earlier executions.
    pub resumed: usize,
}

/// Name of the directory under the output root that holds a matrix's
/// manifest, aggregated CSV and report.
pub fn bundle_dir(pipeline: &Pipeline) -> PathBuf {
    pipeline.root.join("ablation")
}

/// Runs every config of the matrix, continuing past failed runs, then writes
/// the manifest and the aggregated CSV.
pub fn ablate(pipeline: &Pipeline, matrix: &AblationMatrix, base: &RunConfig) -> Result<AblationOutcome> {
    let configs = matrix.expand(base)?;
    let mut entries = Vec::with_capacity(configs.len());
    let mut rows = Vec::new();
    let mut resumed = 0;
    for (i, cfg) in configs.iter().enumerate() {
        if pipeline.verbose {
            eprintln!(
                "[{}/{}] {} size {} seed {}",
                i + 1,
                configs.len(),
                cfg.arm,
                cfg.amb_size,
                cfg.seed
            );
        }
        let (status, error) = match pipeline.run(cfg) {
            Ok(out) => {
                resumed += usize::from(out.skipped);
                rows.extend(out.rows);
                ("complete".to_string(), None)
            }
            Err(e) => {
                if pipeline.verbose {
                    eprintln!("run {} failed: {e}", cfg.short_hash());
                }
                ("failed".to_string(), Some(e.to_string()))
            }
        };
        entries.push(ManifestEntry {
            run_id: cfg.short_hash(),
            arm: cfg.arm.clone(),
            amb_size: cfg.amb_size,
            seed: cfg.seed,
            status,
            error,
        });
    }
    let failed = entries.iter().filter(|e| e.error.is_some()).count();
    let manifest = Manifest {
        expected_runs: matrix.expected_runs(),
        completed: entries.len() - failed,
        failed,
        runs: entries,
    };
    let dir = bundle_dir(pipeline);
    std::fs::create_dir_all(&dir)?;
    write_atomic(
        &dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).unwrap().as_bytes(),
    )?;
    write_atomic(&dir.join("results.csv"), rows_to_csv(&rows).as_bytes())?;
    Ok(AblationOutcome {
        dir,
        manifest,
        rows,
        resumed,
    })
}

pub fn rows_to_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// Rows of an aggregated CSV.
pub fn read_results(path: &std::path::Path) -> Result<Vec<MetricsRow>> {
    read_metrics(path)
}
