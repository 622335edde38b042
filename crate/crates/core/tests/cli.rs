use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# desk-sized run for command-line tests
[data]
size = 30
expert_pool = 8

[amb]
size = 5

[ae]
steps = 20
batch = 32

[policy]
d_model = 8
layers = 1
context = 4
max_ep_len = 100

[optim]
batch = 6
steps = 6
log_every = 3
warmup = 2

[eval]
episodes = 2
snapshots = 2
";

fn reframe(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reframe"))
        .args(args)
        .env("RF_OUT_DIR", out)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, TINY).unwrap();
    path.display().to_string()
}

fn stderr_json(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().expect("an error line");
    serde_json::from_str(line).expect("machine-readable error line")
}

#[test]
fn unknown_override_exits_2_listing_valid_keys() {
    let dir = tempfile::tempdir().unwrap();
    let o = reframe(dir.path(), &["gen-data", "--override", "optim.learning_rate=1"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr_json(&o);
    assert_eq!(err["error"], "unknown_key");
    assert_eq!(err["key"], "optim.learning_rate");
    let keys = err["valid_keys"].as_array().unwrap();
    assert!(keys.iter().any(|k| k == "optim.lr"));
}

#[test]
fn eval_without_training_exits_3_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = reframe(dir.path(), &["eval", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr_json(&o);
    assert_eq!(err["error"], "missing_artifact");
    assert!(err["path"].as_str().unwrap().ends_with("policy.rfpc"));
}

#[test]
fn gen_data_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = write_config(a.path());
    let oa = reframe(a.path(), &["gen-data", "--config", &cfg, "--seed", "0"]);
    let ob = reframe(b.path(), &["gen-data", "--config", &cfg, "--seed", "0"]);
    assert!(oa.status.success(), "{}", String::from_utf8_lossy(&oa.stderr));
    let hashes = |o: &Output| -> Vec<String> {
        String::from_utf8_lossy(&o.stdout)
            .lines()
            .map(|l| l.rsplit(' ').next().unwrap().to_string())
            .collect()
    };
    assert_eq!(hashes(&oa).len(), 2);
    assert_eq!(hashes(&oa), hashes(&ob));
    // rerunning into the same root reuses the artifacts
    let again = reframe(a.path(), &["gen-data", "--config", &cfg, "--seed", "0"]);
    assert_eq!(hashes(&again), hashes(&oa));
}

#[test]
fn subcommands_chain_and_write_resolved_configs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("runs");
    let out_s = out.display().to_string();
    let step = |args: &[&str]| {
        let mut v = args.to_vec();
        v.extend(["--config", &cfg, "--out", &out_s]);
        let o = reframe(dir.path(), &v);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8_lossy(&o.stdout).to_string()
    };
    let o = reframe(dir.path(), &["train-ae", "--config", &cfg, "--out", &out_s]);
    assert_eq!(o.status.code(), Some(3));
    step(&["gen-data"]);
    step(&["train-ae"]);
    assert!(step(&["build-amb"]).contains("rows 500"));
    step(&["train-policy"]);
    let eval = step(&["eval"]);
    assert!(eval.contains("mean_score"));
    let run_dir = eval.lines().next().unwrap().trim_start_matches("run ").to_string();
    let run_dir = Path::new(&run_dir);
    for f in ["config.cfg", "metrics.csv", "summary.json"] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }
    let resolved = std::fs::read_to_string(run_dir.join("config.cfg")).unwrap();
    assert!(resolved.contains("size = 30"));

    // fine-tuning a reframe run is a configuration error
    let o = reframe(dir.path(), &["finetune", "--config", &cfg, "--out", &out_s, "--override", "finetune.steps=2"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_json(&o)["error"], "config");
}

#[test]
fn report_on_an_empty_bundle_is_headers_only() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("ablation");
    std::fs::create_dir_all(&bundle).unwrap();
    std::fs::write(bundle.join("results.csv"), format!("{}\n", reframe::train::METRICS_HEADER)).unwrap();
    let out = dir.path().display().to_string();
    let o = reframe(dir.path(), &["report", "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = std::fs::read_to_string(bundle.join("summary.txt")).unwrap();
    let table: Vec<&str> = summary.lines().filter(|l| !l.is_empty()).collect();
    assert_eq!(table.len(), 2, "{summary}");
    assert!(table[1].starts_with("variant"));
    let svgs = std::fs::read_dir(&bundle)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "svg"))
        .count();
    assert_eq!(svgs, 0);
}

#[test]
fn ablate_subset_writes_manifest_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("abl").display().to_string();
    let args = [
        "ablate",
        "--config",
        &cfg,
        "--out",
        &out,
        "--arms",
        "baseline_dt,reframe_expert",
        "--sizes",
        "5,3",
        "--seeds",
        "0",
    ];
    let o = reframe(dir.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("runs 3 complete 3 failed 0 resumed 0"), "{stdout}");
    assert!(stdout.contains("criterion 5"));
    let bundle = Path::new(&out).join("ablation");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(bundle.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["expected_runs"], 3);
    let summary = std::fs::read(bundle.join("summary.txt")).unwrap();
    let plot = std::fs::read(bundle.join("score_vs_size_point_mass.svg")).unwrap();

    let again = reframe(dir.path(), &args);
    assert!(String::from_utf8_lossy(&again.stdout).contains("resumed 3"));
    let o = reframe(dir.path(), &["report", "--out", &out]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(bundle.join("summary.txt")).unwrap(), summary);
    assert_eq!(std::fs::read(bundle.join("score_vs_size_point_mass.svg")).unwrap(), plot);
}
