//! Ablation matrices over the standard arms, and report rendering.

mod matrix;
pub mod plot;
mod report;

pub use matrix::{
    ablate, bundle_dir, read_results, rows_to_csv, AblationMatrix, AblationOutcome, Arm, Manifest, ManifestEntry,
    ARMS, BASELINE_DT, FINETUNED_DT, REFRAME_DATASET_AMB, REFRAME_EXPERT, REFRAME_SWAP_EVAL, SEEDS, SIZES,
};
pub use report::{final_rows, GroupStats, Report, Status, Verdict};

use std::path::{Path, PathBuf};

use crate::error::Result;

/// Renders the report of an aggregated CSV into `out_dir`. Arms listed as
/// failed in a sibling `manifest.json` are marked incomplete.
pub fn report_from_csv(csv: &Path, out_dir: &Path) -> Result<(Report, Vec<PathBuf>)> {
    let rows = read_results(csv)?;
    let mut failed = Vec::new();
    if let Some(manifest) = csv.parent().map(|p| p.join("manifest.json")) {
        if let Ok(text) = std::fs::read_to_string(manifest) {
            if let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) {
                for run in v["runs"].as_array().into_iter().flatten() {
                    if run["status"] == "failed" {
                        if let Some(arm) = run["arm"].as_str() {
                            failed.push(arm.to_string());
                        }
                    }
                }
            }
        }
    }
    failed.sort();
    failed.dedup();
    let report = Report::from_rows(&rows, &failed);
    let files = report.write(out_dir)?;
    Ok((report, files))
}
