use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use reframe::binio::sha256_hex;
use reframe::harness::{ablate, bundle_dir, report_from_csv, AblationMatrix};
use reframe::train::{write_atomic, MemorySource, Pipeline, RunConfig};
use reframe::{Error, Result};

#[derive(Parser)]
#[command(name = "reframe", version, about = "Decision Transformer with a frozen expert memory: data, training, evaluation and ablations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration file (flat key = value with [sections]).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; defaults to $RF_OUT_DIR, then ./out.
    #[arg(long)]
    out: Option<PathBuf>,
    /// KEY=VALUE override, applied after the config file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Progress messages on stderr.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Args, Clone)]
struct SourceArg {
    /// Memory source; defaults to the config's amb.source.
    #[arg(long)]
    source: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training dataset and the expert pool.
    GenData(Common),
    /// Train and freeze the stage-1 autoencoder for a memory source.
    TrainAe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: SourceArg,
    },
    /// Encode the memory trajectories into a buffer file.
    BuildAmb {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: SourceArg,
    },
    /// Stage 2: train the policy.
    TrainPolicy(Common),
    /// Evaluate every snapshot of a trained policy and write the run directory.
    Eval(Common),
    /// Continue a baseline checkpoint on the expert trajectories.
    Finetune(Common),
    /// Run the ablation matrix, then render its report.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated arm subset.
        #[arg(long, value_delimiter = ',')]
        arms: Vec<String>,
        /// Comma-separated memory sizes.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Fine-tuning budget; a tenth of optim.steps by default.
        #[arg(long)]
        finetune_steps: Option<usize>,
    },
    /// Render the summary table, verdicts and plots of an aggregated CSV.
    Report {
        /// Output root holding the ablation bundle; as for the other commands.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Aggregated CSV; defaults to <out>/ablation/results.csv.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Report directory; defaults to the CSV's directory.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn out_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("RF_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn resolve(common: &Common) -> Result<(RunConfig, Pipeline)> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let mut p = Pipeline::new(out_root(common.out.clone()));
    p.auto = false;
    p.verbose = common.verbose;
    Ok((cfg, p))
}

/// Records the resolved config beside the run's outputs.
fn write_resolved(p: &Pipeline, cfg: &RunConfig) -> Result<()> {
    let dir = p.run_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    write_atomic(&dir.join("config.cfg"), cfg.to_text().as_bytes())
}

fn source(cfg: &RunConfig, arg: &SourceArg) -> Result<MemorySource> {
    let s = match &arg.source {
        Some(s) => MemorySource::parse(s)?,
        None => cfg.train_source,
    };
    if s == MemorySource::None {
        return Err(Error::Argument("a memory source (expert or dataset) is required".into()));
    }
    Ok(s)
}

fn file_line(label: &str, path: &std::path::Path) -> Result<()> {
    let bytes = std::fs::read(path)?;
    println!("{label} {} sha256 {}", path.display(), sha256_hex(&bytes));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let (cfg, p) = resolve(&common)?;
            write_resolved(&p, &cfg)?;
            p.gen_data(&cfg)?;
            file_line("dataset", &p.data_stage(&cfg).path("dataset.rfds"))?;
            file_line("expert_pool", &p.expert_stage(&cfg).path("dataset.rfds"))?;
        }
        Command::TrainAe { common, source: s } => {
            let (cfg, p) = resolve(&common)?;
            let src = source(&cfg, &s)?;
            write_resolved(&p, &cfg)?;
            p.train_ae(&cfg, src)?;
            file_line("autoencoder", &p.stage1(&cfg, src)?.path("ae.rfae"))?;
        }
        Command::BuildAmb { common, source: s } => {
            let (cfg, p) = resolve(&common)?;
            let src = source(&cfg, &s)?;
            write_resolved(&p, &cfg)?;
            let buf = p.build_amb(&cfg, src)?;
            println!("rows {}", buf.len());
            file_line("buffer", &p.stage1(&cfg, src)?.path("amb.rfmb"))?;
        }
        Command::TrainPolicy(common) => {
            let (cfg, p) = resolve(&common)?;
            write_resolved(&p, &cfg)?;
            let path = p.train_stage2(&cfg)?;
            file_line("checkpoint", &path)?;
        }
        Command::Finetune(common) => {
            let (cfg, p) = resolve(&common)?;
            write_resolved(&p, &cfg)?;
            let path = p.finetune(&cfg)?;
            file_line("checkpoint", &path)?;
        }
        Command::Eval(common) => {
            let (cfg, p) = resolve(&common)?;
            let out = p.evaluate_run(&cfg)?;
            let last = out.final_row();
            println!("run {}", out.dir.display());
            println!(
                "step {} mean_score {:.3} std_score {:.3} mean_return {:.4}",
                last.step, last.mean_score, last.std_score, last.mean_return
            );
        }
        Command::Ablate {
            common,
            arms,
            sizes,
            seeds,
            finetune_steps,
        } => {
            let (cfg, mut p) = resolve(&common)?;
            p.auto = true;
            let mut matrix = AblationMatrix::standard(&cfg, finetune_steps);
            if !arms.is_empty() {
                matrix = matrix.select(&arms)?;
            }
            if !sizes.is_empty() {
                matrix.sizes = sizes;
            }
            if !seeds.is_empty() {
                matrix.seeds = seeds;
            }
            let outcome = ablate(&p, &matrix, &cfg)?;
            println!(
                "runs {} complete {} failed {} resumed {}",
                outcome.manifest.expected_runs, outcome.manifest.completed, outcome.manifest.failed, outcome.resumed
            );
            let (report, files) = report_from_csv(&outcome.dir.join("results.csv"), &outcome.dir)?;
            print!("{}", report.text());
            for f in files {
                println!("wrote {}", f.display());
            }
        }
        Command::Report { out, input, dir } => {
            let csv = input.unwrap_or_else(|| bundle_dir(&Pipeline::new(out_root(out))).join("results.csv"));
            let dir = dir.unwrap_or_else(|| csv.parent().map(PathBuf::from).unwrap_or_default());
            let (report, files) = report_from_csv(&csv, &dir)?;
            print!("{}", report.text());
            for f in files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut line = json!({ "error": e.kind(), "message": e.to_string() });
            match &e {
                Error::MissingArtifact(p) => line["path"] = json!(p.display().to_string()),
                Error::UnknownKey { key, .. } => {
                    line["key"] = json!(key);
                    line["valid_keys"] = json!(RunConfig::keys());
                }
                _ => {}
            }
            eprintln!("{line}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
