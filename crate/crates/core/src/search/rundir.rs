//! Run-directory layout and file formats.
//!
//! ```text
//! <run>/
//!   config.copy          verbatim copy of the input config file
//!   trials.csv           append-only log: trial,status,loss,wall_seconds,seed,theta
//!   checkpoints/
//!     history.json       full TrialHistory, atomically replaced every trial
//!   best_genotype.json   winner in the genotype JSON schema
//!   best_cells.dot       winner as Graphviz DOT, one digraph per cell
//!   report.json          summary statistics
//! ```
//!
//! Losses and seeds in trials.csv round-trip exactly (shortest-representation
//! floats); `wall_seconds` is wall-clock telemetry and the one column outside
//! the determinism guarantee. Failed trials leave the loss field empty. Theta
//! codes are semicolon-joined integers.

use crate::error::{Error, Result};
use crate::tpe::{TrialHistory, TrialRecord, TrialStatus};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const TRIALS_HEADER: &str = "trial,status,loss,wall_seconds,seed,theta";

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

/// Checkpoint written after every trial; resuming verifies the config hash
/// and seed before continuing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunCheckpoint {
    pub config_hash: String,
    pub master_seed: u64,
    pub history: TrialHistory,
}

impl RunDir {
    pub fn create(root: &Path, config_text: &str) -> Result<Self> {
        std::fs::create_dir_all(root.join("checkpoints"))?;
        std::fs::write(root.join("config.copy"), config_text)?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::config(
                "out_dir",
                format!("{} is not a run directory", root.display()),
            ));
        }
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn trials_path(&self) -> PathBuf {
        self.root.join("trials.csv")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.root.join("checkpoints").join("history.json")
    }

    pub fn best_genotype_path(&self) -> PathBuf {
        self.root.join("best_genotype.json")
    }

    pub fn best_dot_path(&self) -> PathBuf {
        self.root.join("best_cells.dot")
    }

    pub fn report_path(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn has_checkpoint(&self) -> bool {
        self.checkpoint_path().is_file()
    }

    /// Rewrite trials.csv from a full history (used when resuming, so prior
    /// rows keep their recorded telemetry).
    pub fn rewrite_trials(&self, history: &TrialHistory) -> Result<()> {
        let mut text = String::from(TRIALS_HEADER);
        text.push('\n');
        for record in history.records() {
            text.push_str(&trial_line(record));
            text.push('\n');
        }
        std::fs::write(self.trials_path(), text)?;
        Ok(())
    }

    pub fn append_trial(&self, record: &TrialRecord) -> Result<()> {
        let path = self.trials_path();
        let mut file = if path.is_file() {
            std::fs::OpenOptions::new().append(true).open(&path)?
        } else {
            let mut f = std::fs::File::create(&path)?;
            writeln!(f, "{TRIALS_HEADER}")?;
            f
        };
        writeln!(file, "{}", trial_line(record))?;
        Ok(())
    }

    /// Atomic replace via a temp file in the same directory.
    pub fn write_checkpoint(&self, checkpoint: &RunCheckpoint) -> Result<()> {
        let path = self.checkpoint_path();
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(checkpoint)?)?;
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }

    pub fn read_checkpoint(&self) -> Result<RunCheckpoint> {
        let bytes = std::fs::read(self.checkpoint_path()).map_err(|e| Error::Config {
            key: "resume".into(),
            reason: format!("no checkpoint in {}: {e}", self.root.display()),
        })?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

fn trial_line(record: &TrialRecord) -> String {
    let status = match record.status {
        TrialStatus::Ok => "ok",
        TrialStatus::Failed => "failed",
    };
    let loss = record.loss.map(|l| format!("{l}")).unwrap_or_default();
    let theta = record
        .theta
        .iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(";");
    format!(
        "{},{},{},{:.6},{},{}",
        record.index, status, loss, record.wall_seconds, record.seed, theta
    )
}

/// One parsed trials.csv row.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRow {
    pub index: usize,
    pub status: TrialStatus,
    pub loss: Option<f64>,
    pub wall_seconds: f64,
    pub seed: u64,
    pub theta: Vec<u8>,
}

/// Parse a trials.csv file written by [`RunDir::append_trial`].
pub fn read_trials(path: &Path) -> Result<Vec<TrialRow>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header == TRIALS_HEADER => {}
        other => {
            return Err(Error::format(
                path.display().to_string(),
                format!("bad header {other:?}"),
            ))
        }
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::format(
                path.display().to_string(),
                format!("line {}: expected 6 fields, got {}", lineno + 2, fields.len()),
            ));
        }
        let bad = |what: &str| {
            Error::format(
                path.display().to_string(),
                format!("line {}: bad {what}", lineno + 2),
            )
        };
        let index: usize = fields[0].parse().map_err(|_| bad("trial"))?;
        let status = match fields[1] {
            "ok" => TrialStatus::Ok,
            "failed" => TrialStatus::Failed,
            _ => return Err(bad("status")),
        };
        let loss: Option<f64> = if fields[2].is_empty() {
            None
        } else {
            Some(fields[2].parse().map_err(|_| bad("loss"))?)
        };
        let wall_seconds: f64 = fields[3].parse().map_err(|_| bad("wall_seconds"))?;
        let seed: u64 = fields[4].parse().map_err(|_| bad("seed"))?;
        let theta = if fields[5].is_empty() {
            Vec::new()
        } else {
            fields[5]
                .split(';')
                .map(|c| c.parse::<u8>().map_err(|e| e.to_string()))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| {
                    Error::format(
                        path.display().to_string(),
                        format!("line {}: bad theta: {e}", lineno + 2),
                    )
                })?
        };
        rows.push(TrialRow {
            index,
            status,
            loss,
            wall_seconds,
            seed,
            theta,
        });
    }
    Ok(rows)
}

/// trials.csv with the wall_seconds column blanked: the canonical form used
/// by determinism comparisons, since wall time is physical telemetry.
pub fn canonical_trials(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    let mut out = String::with_capacity(text.len());
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            out.push_str(line);
        } else {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(Error::format(
                    path.display().to_string(),
                    format!("line {}: expected 6 fields", i + 1),
                ));
            }
            out.push_str(&format!(
                "{},{},{},-,{},{}",
                fields[0], fields[1], fields[2], fields[4], fields[5]
            ));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Loss summary over the successful trials of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossQuantiles {
    pub min: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub max: f64,
}

/// Linear-interpolation quantile on a sorted copy of the values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let t = pos - lo as f64;
        sorted[lo] * (1.0 - t) + sorted[hi] * t
    }
}

pub fn loss_quantiles(losses: &[f64]) -> Option<LossQuantiles> {
    if losses.is_empty() {
        return None;
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite losses"));
    Some(LossQuantiles {
        min: sorted[0],
        p25: quantile(&sorted, 0.25),
        median: quantile(&sorted, 0.5),
        p75: quantile(&sorted, 0.75),
        max: sorted[sorted.len() - 1],
    })
}
