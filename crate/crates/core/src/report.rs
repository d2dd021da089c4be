//! Run reporting: a line-delimited metrics file for machines, a plain-text
//! report for humans, and the run-directory layout.

use crate::distill::{RunOutcome, StepRecord};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// One row of `metrics.records`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MetricRow {
    /// Per-optimizer-step loss components (the loss history).
    Step(StepRecord),
    Round {
        round: usize,
        retained_fraction: f64,
        mean_similarity: f64,
        pool_size: usize,
        accuracy: Option<f64>,
    },
    Summary {
        final_accuracy: Option<f64>,
        best_accuracy: Option<f64>,
        initial_accuracy: Option<f64>,
        teacher_checksum_before: String,
        teacher_checksum_after: String,
    },
    /// Free-form evaluation rows (sweeps, FID blocks).
    Eval {
        label: String,
        value: f64,
    },
}

/// Standard layout inside one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Create a fresh timestamped run directory under `base`:
    /// `<base>/<name>-<epoch_millis>[-n]`. Never reuses an existing one.
    pub fn create(base: &Path, name: &str) -> Result<Self> {
        let millis = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0);
        for attempt in 0..1000u32 {
            let dir = if attempt == 0 {
                base.join(format!("{name}-{millis}"))
            } else {
                base.join(format!("{name}-{millis}-{attempt}"))
            };
            if !dir.exists() {
                std::fs::create_dir_all(&dir)?;
                return Ok(RunDir { root: dir });
            }
        }
        Err(Error::invalid("could not allocate a fresh run directory"))
    }

    pub fn open(root: PathBuf) -> Self {
        RunDir { root }
    }

    pub fn config_echo(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.records")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.txt")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn synth_cache(&self) -> PathBuf {
        self.root.join("synth_cache")
    }

    pub fn aug_cache(&self) -> PathBuf {
        self.root.join("aug_cache")
    }

    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }
}

/// Append rows to a `metrics.records` file (JSON lines).
pub fn append_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    for row in rows {
        let line = serde_json::to_string(row).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

/// Read every row of a metrics file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(line)
                .map_err(|e| Error::invalid(format!("metrics line {}: {e}", i + 1)))?,
        );
    }
    Ok(rows)
}

/// Just the loss history (step rows), in order.
pub fn read_step_records(path: &Path) -> Result<Vec<StepRecord>> {
    Ok(read_metrics(path)?
        .into_iter()
        .filter_map(|r| match r {
            MetricRow::Step(s) => Some(s),
            _ => None,
        })
        .collect())
}

/// Write the full metrics file for a finished run.
pub fn write_run_metrics(path: &Path, outcome: &RunOutcome) -> Result<()> {
    let mut rows: Vec<MetricRow> = Vec::new();
    for s in &outcome.history {
        rows.push(MetricRow::Step(s.clone()));
    }
    for r in &outcome.rounds {
        rows.push(MetricRow::Round {
            round: r.round,
            retained_fraction: r.retained_fraction,
            mean_similarity: r.mean_similarity,
            pool_size: r.pool_size,
            accuracy: r.student_accuracy,
        });
    }
    rows.push(MetricRow::Summary {
        final_accuracy: outcome.final_accuracy,
        best_accuracy: outcome.best_accuracy,
        initial_accuracy: outcome.initial_accuracy,
        teacher_checksum_before: format!("{:016x}", outcome.teacher_checksum_before),
        teacher_checksum_after: format!("{:016x}", outcome.teacher_checksum_after),
    });
    append_metrics(path, &rows)
}

fn fmt_acc(a: Option<f64>) -> String {
    match a {
        Some(v) => format!("{:.2}%", v * 100.0),
        None => "n/a".into(),
    }
}

/// Human-readable run report.
pub fn write_run_report(path: &Path, config_echo: &str, outcome: &RunOutcome) -> Result<()> {
    let mut out = String::new();
    out.push_str("== run report ==\n\n");
    out.push_str(&format!(
        "teacher checksum: {:016x} -> {:016x} ({})\n",
        outcome.teacher_checksum_before,
        outcome.teacher_checksum_after,
        if outcome.teacher_checksum_before == outcome.teacher_checksum_after {
            "frozen"
        } else {
            "MUTATED"
        }
    ));
    out.push_str(&format!(
        "accuracy: initial {}, final {}, best {}{}\n",
        fmt_acc(outcome.initial_accuracy),
        fmt_acc(outcome.final_accuracy),
        fmt_acc(outcome.best_accuracy),
        outcome
            .best_round
            .map(|r| format!(" (round {r})"))
            .unwrap_or_default()
    ));
    if let Some(stage) = &outcome.failed_stage {
        out.push_str(&format!("FAILED at stage: {stage}\n"));
    }
    out.push_str("\nround  synth_obj  retained  mean_sim  pool   accuracy\n");
    for r in &outcome.rounds {
        out.push_str(&format!(
            "{:>5}  {:>9.4}  {:>7.1}%  {:>8.4}  {:>5}  {}\n",
            r.round,
            r.synthesis_final.objective,
            r.retained_fraction * 100.0,
            r.mean_similarity,
            r.pool_size,
            fmt_acc(r.student_accuracy),
        ));
    }
    if let Some(last) = outcome.rounds.last() {
        let throughput: f64 = last
            .epochs
            .iter()
            .map(|e| e.images_per_second)
            .sum::<f64>()
            / last.epochs.len().max(1) as f64;
        out.push_str(&format!(
            "\nlast-round distillation throughput: {throughput:.0} images/s\n"
        ));
    }
    out.push_str("\n== effective config ==\n\n");
    out.push_str(config_echo);
    std::fs::write(path, out)?;
    Ok(())
}
