//! Aggregation of per-seed metrics rows into a summary table, ordering
//! verdicts and plots.
//!
//! Formulas, all over the final (largest-step) row of each run:
//! - group mean = average of the per-seed final scores
//! - group std = sample standard deviation (n - 1 denominator, 0 when n = 1)
//! - group se = std / sqrt(n)
//! - gap(a, b) = mean(a) - mean(b), with pooled se = sqrt(se(a)^2 + se(b)^2)

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::matrix::{ARMS, BASELINE_DT, FINETUNED_DT, REFRAME_DATASET_AMB, REFRAME_EXPERT, REFRAME_SWAP_EVAL};
use super::plot::{LinePlot, Point, Series};
use crate::error::Result;
use crate::train::{write_atomic, MetricsRow};

/// Aggregate of one (variant, arm, memory size) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupStats {
    pub variant: String,
    pub arm: String,
    pub amb_size: usize,
    pub seeds: Vec<u64>,
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub se: f64,
}

impl GroupStats {
    fn new(variant: &str, arm: &str, amb_size: usize, mut per_seed: Vec<(u64, f64)>) -> Self {
        per_seed.sort_by_key(|(s, _)| *s);
        let scores: Vec<f64> = per_seed.iter().map(|(_, v)| *v).collect();
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let std = if scores.len() > 1 {
            (scores.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            variant: variant.into(),
            arm: arm.into(),
            amb_size,
            seeds: per_seed.iter().map(|(s, _)| *s).collect(),
            scores,
            mean,
            std,
            se: std / n.sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    Incomplete,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Incomplete => "INCOMPLETE",
        }
    }

    fn from(ok: bool) -> Self {
        if ok {
            Status::Pass
        } else {
            Status::Fail
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Verdict {
    /// Acceptance criterion number.
    pub criterion: u8,
    pub variant: String,
    pub name: &'static str,
    pub status: Status,
    pub gap: Option<f64>,
    pub se: Option<f64>,
    pub detail: String,
}

impl Verdict {
    pub fn line(&self) -> String {
        format!(
            "criterion {} [{}] {}: {} ({})",
            self.criterion,
            self.variant,
            self.name,
            self.status.as_str(),
            self.detail
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub groups: Vec<GroupStats>,
    pub verdicts: Vec<Verdict>,
    /// (variant, arm, size) -> step -> per-seed scores, for training curves.
    curves: BTreeMap<(String, usize, usize), BTreeMap<usize, Vec<f64>>>,
}

fn arm_rank(arm: &str) -> usize {
    ARMS.iter().position(|a| *a == arm).unwrap_or(ARMS.len())
}

/// Last-step row of every run, in a stable order.
pub fn final_rows(rows: &[MetricsRow]) -> Vec<&MetricsRow> {
    let mut last: BTreeMap<&str, &MetricsRow> = BTreeMap::new();
    for r in rows {
        match last.get(r.run_id.as_str()) {
            Some(prev) if prev.step >= r.step => {}
            _ => {
                last.insert(&r.run_id, r);
            }
        }
    }
    last.into_values().collect()
}

fn gap(a: &GroupStats, b: &GroupStats) -> (f64, f64) {
    (a.mean - b.mean, (a.se.powi(2) + b.se.powi(2)).sqrt())
}

impl Report {
    /// Aggregates `rows`. Arms named in `failed_arms` make every verdict
    /// that needs them incomplete.
    pub fn from_rows(rows: &[MetricsRow], failed_arms: &[String]) -> Self {
        let mut cells: BTreeMap<(String, usize, String, std::cmp::Reverse<usize>), Vec<(u64, f64)>> = BTreeMap::new();
        for r in final_rows(rows) {
            cells
                .entry((r.variant.clone(), arm_rank(&r.arm), r.arm.clone(), std::cmp::Reverse(r.amb_size)))
                .or_default()
                .push((r.seed, r.mean_score));
        }
        let groups: Vec<GroupStats> = cells
            .into_iter()
            .map(|((variant, _, arm, size), v)| GroupStats::new(&variant, &arm, size.0, v))
            .collect();

        let mut curves: BTreeMap<(String, usize, usize), BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
        for r in rows {
            curves
                .entry((r.variant.clone(), arm_rank(&r.arm), r.amb_size))
                .or_default()
                .entry(r.step)
                .or_default()
                .push(r.mean_score);
        }

        let mut variants: Vec<&str> = groups.iter().map(|g| g.variant.as_str()).collect();
        variants.dedup();
        let mut verdicts = Vec::new();
        for v in variants {
            verdicts.extend(Self::verdicts_for(v, &groups, failed_arms));
        }
        Self {
            groups,
            verdicts,
            curves,
        }
    }

    fn verdicts_for(variant: &str, groups: &[GroupStats], failed: &[String]) -> Vec<Verdict> {
        let in_variant: Vec<&GroupStats> = groups.iter().filter(|g| g.variant == variant).collect();
        // memory-size comparisons use the largest size present
        let reference = in_variant
            .iter()
            .filter(|g| g.arm.starts_with("reframe"))
            .map(|g| g.amb_size)
            .max();
        let find = |arm: &str, size: Option<usize>| -> Option<&GroupStats> {
            if failed.iter().any(|f| f == arm) {
                return None;
            }
            in_variant
                .iter()
                .copied()
                .find(|g| g.arm == arm && size.is_none_or(|s| g.amb_size == s))
        };
        let base = find(BASELINE_DT, None);
        let expert = find(REFRAME_EXPERT, reference);
        let mk = |criterion, name, status, gap, se, detail: String| Verdict {
            criterion,
            variant: variant.into(),
            name,
            status,
            gap,
            se,
            detail,
        };
        let missing = |criterion, name, needs: &str| {
            mk(criterion, name, Status::Incomplete, None, None, format!("missing {needs}"))
        };
        let mut out = Vec::new();

        const C5: &str = "reframe_expert beats baseline_dt";
        out.push(match (expert, base) {
            (Some(e), Some(b)) => {
                let (g, se) = gap(e, b);
                mk(
                    5,
                    C5,
                    Status::from(g >= 3.0 && g > 2.0 * se),
                    Some(g),
                    Some(se),
                    format!("gap {g:.3} se {se:.3}; needs gap >= 3 and > 2 se"),
                )
            }
            _ => missing(5, C5, "reframe_expert or baseline_dt"),
        });

        const C6: &str = "swap-at-eval gains at most 1 point";
        out.push(match (find(REFRAME_SWAP_EVAL, reference), base) {
            (Some(s), Some(b)) => {
                let (g, se) = gap(s, b);
                mk(
                    6,
                    C6,
                    Status::from(g <= 1.0),
                    Some(g),
                    Some(se),
                    format!("gap {g:.3} se {se:.3}; needs gap <= 1"),
                )
            }
            _ => missing(6, C6, "reframe_swap_eval or baseline_dt"),
        });

        const C7: &str = "dataset memory within 3 points of baseline_dt";
        out.push(match (find(REFRAME_DATASET_AMB, reference), base) {
            (Some(d), Some(b)) => {
                let (g, se) = gap(d, b);
                mk(
                    7,
                    C7,
                    Status::from(g.abs() <= 3.0),
                    Some(g),
                    Some(se),
                    format!("gap {g:.3} se {se:.3}; needs |gap| <= 3"),
                )
            }
            _ => missing(7, C7, "reframe_dataset_amb or baseline_dt"),
        });

        const C8: &str = "score non-increasing as memory shrinks 60 -> 45 -> 30";
        let by_size: Vec<&GroupStats> = [60, 45, 30]
            .iter()
            .filter_map(|&s| find(REFRAME_EXPERT, Some(s)))
            .collect();
        out.push(if by_size.len() == 3 {
            let mono = by_size[0].mean >= by_size[1].mean && by_size[1].mean >= by_size[2].mean;
            let (g, se) = gap(by_size[0], by_size[2]);
            mk(
                8,
                C8,
                Status::from(mono && g > 2.0 * se),
                Some(g),
                Some(se),
                format!(
                    "means {:.3} / {:.3} / {:.3}; 60 vs 30 gap {g:.3} se {se:.3}; needs monotone and gap > 2 se",
                    by_size[0].mean, by_size[1].mean, by_size[2].mean
                ),
            )
        } else {
            missing(8, C8, "reframe_expert at sizes 60, 45 and 30")
        });

        const C9: &str = "fine-tuning gains less than reframe_expert";
        out.push(match (find(FINETUNED_DT, None), expert, base) {
            (Some(f), Some(e), Some(b)) => {
                let gf = f.mean - b.mean;
                let ge = e.mean - b.mean;
                mk(
                    9,
                    C9,
                    Status::from(gf < ge),
                    Some(ge - gf),
                    None,
                    format!("finetuned gain {gf:.3} vs reframe gain {ge:.3}; needs finetuned < reframe"),
                )
            }
            _ => missing(9, C9, "finetuned_dt, reframe_expert or baseline_dt"),
        });
        out
    }

    pub fn table_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:<20} {:>8} {:>3} {:>10} {:>10} {:>10}",
            "variant", "arm", "amb_size", "n", "mean", "std", "se"
        );
        for g in &self.groups {
            let _ = writeln!(
                s,
                "{:<12} {:<20} {:>8} {:>3} {:>10.3} {:>10.3} {:>10.3}",
                g.variant,
                g.arm,
                g.amb_size,
                g.scores.len(),
                g.mean,
                g.std,
                g.se
            );
        }
        s
    }

    pub fn text(&self) -> String {
        let mut s = String::from("normalized score of the final snapshot, mean over seeds\n\n");
        s.push_str(&self.table_text());
        if !self.verdicts.is_empty() {
            s.push_str("\nordering verdicts\n");
            for v in &self.verdicts {
                s.push_str(&v.line());
                s.push('\n');
            }
        }
        s
    }

    /// Mean score against memory size for the sized arms, with the unsized
    /// arms drawn as dashed reference lines.
    pub fn size_plot(&self, variant: &str) -> Option<LinePlot> {
        let groups: Vec<&GroupStats> = self.groups.iter().filter(|g| g.variant == variant).collect();
        let mut sizes: Vec<usize> = groups
            .iter()
            .filter(|g| g.arm.starts_with("reframe"))
            .map(|g| g.amb_size)
            .collect();
        if sizes.is_empty() {
            return None;
        }
        sizes.sort_unstable();
        sizes.dedup();
        let (lo, hi) = (sizes[0] as f64, sizes[sizes.len() - 1] as f64);
        let mut series = Vec::new();
        for arm in ARMS {
            let cells: Vec<&&GroupStats> = groups.iter().filter(|g| g.arm == arm).collect();
            if cells.is_empty() {
                continue;
            }
            let sized = arm.starts_with("reframe");
            let points = if sized {
                let mut p: Vec<Point> = cells
                    .iter()
                    .map(|g| Point {
                        x: g.amb_size as f64,
                        y: g.mean,
                        err: Some(g.se),
                    })
                    .collect();
                p.sort_by(|a, b| a.x.total_cmp(&b.x));
                p
            } else {
                [lo, hi]
                    .iter()
                    .map(|&x| Point {
                        x,
                        y: cells[0].mean,
                        err: None,
                    })
                    .collect()
            };
            series.push(Series {
                label: arm.into(),
                points,
                dashed: !sized,
            });
        }
        Some(LinePlot {
            title: format!("{variant}: score vs memory size"),
            x_label: "memory size (expert trajectories)".into(),
            y_label: "normalized score".into(),
            series,
            x_ticks: Some(sizes.iter().map(|s| *s as f64).collect()),
        })
    }

    /// Mean evaluation score against training step, one line per size.
    pub fn curve_plot(&self, variant: &str, arm: &str) -> Option<LinePlot> {
        let rank = arm_rank(arm);
        let mut series = Vec::new();
        for ((v, r, size), steps) in self.curves.iter().rev() {
            if v != variant || *r != rank {
                continue;
            }
            let points = steps
                .iter()
                .map(|(step, scores)| Point {
                    x: *step as f64,
                    y: scores.iter().sum::<f64>() / scores.len() as f64,
                    err: None,
                })
                .collect();
            let label = if arm.starts_with("reframe") {
                format!("size {size}")
            } else {
                arm.to_string()
            };
            series.push(Series {
                label,
                points,
                dashed: false,
            });
        }
        if series.is_empty() {
            return None;
        }
        Some(LinePlot {
            title: format!("{variant}: {arm} evaluation during training"),
            x_label: "training step".into(),
            y_label: "normalized score".into(),
            series,
            x_ticks: None,
        })
    }

    /// Writes `summary.txt` and the plots into `dir`; returns the files
    /// written, in order.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        let summary = dir.join("summary.txt");
        write_atomic(&summary, self.text().as_bytes())?;
        files.push(summary);
        let mut variants: Vec<&str> = self.groups.iter().map(|g| g.variant.as_str()).collect();
        variants.dedup();
        for v in variants {
            if let Some(p) = self.size_plot(v) {
                let f = dir.join(format!("score_vs_size_{v}.svg"));
                write_atomic(&f, p.render().as_bytes())?;
                files.push(f);
            }
            for arm in ARMS {
                if let Some(p) = self.curve_plot(v, arm) {
                    let f = dir.join(format!("curve_{v}_{arm}.svg"));
                    write_atomic(&f, p.render().as_bytes())?;
                    files.push(f);
                }
            }
        }
        Ok(files)
    }
}
