//! Run records: per-step loss rows (JSONL), per-epoch metrics (CSV), and the
//! config snapshot that produced them.

use crate::error::Result;
use std::io::Write;
use std::path::Path;

/// One optimizer step. `wall_ms` is informational and excluded from any
/// determinism comparison.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub task_loss: f64,
    pub distill_loss: f64,
    pub diversity_loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Evaluation after one epoch.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
}

/// Everything a run leaves behind, accumulated in memory then flushed.
#[derive(Clone, Debug, Default)]
pub struct RunRecord {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub config_snapshot: String,
    pub config_hash: String,
    pub src_hash: String,
}

impl RunRecord {
    pub fn new(config_snapshot: String, config_hash: String) -> RunRecord {
        RunRecord {
            steps: Vec::new(),
            epochs: Vec::new(),
            config_snapshot,
            config_hash,
            src_hash: crate::SRC_HASH.to_string(),
        }
    }

    pub fn final_map(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.map)
    }

    /// Write steps.jsonl, metrics.csv, and config.toml into `dir`.
    /// Deterministic content except the wall-clock fields.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut steps = std::io::BufWriter::new(std::fs::File::create(dir.join("steps.jsonl"))?);
        for s in &self.steps {
            serde_json::to_writer(&mut steps, s)?;
            steps.write_all(b"\n")?;
        }
        steps.flush()?;

        let mut csv = String::from("epoch,map,ap50,ap75\n");
        for e in &self.epochs {
            csv.push_str(&format!("{},{:.6},{:.6},{:.6}\n", e.epoch, e.map, e.ap50, e.ap75));
        }
        std::fs::write(dir.join("metrics.csv"), csv)?;

        let snapshot = format!(
            "# config hash: {}\n# src hash: {}\n{}",
            self.config_hash, self.src_hash, self.config_snapshot
        );
        std::fs::write(dir.join("config.toml"), snapshot)?;
        Ok(())
    }

    /// Read back the step rows of a saved run.
    pub fn load_steps(dir: &Path) -> Result<Vec<StepRecord>> {
        let text = std::fs::read_to_string(dir.join("steps.jsonl"))?;
        let mut out = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(line)?);
        }
        Ok(out)
    }
}

/// Compare two step sequences for determinism: identical step/epoch indices
/// and losses within `tol`, ignoring wall time.
pub fn curves_match(a: &[StepRecord], b: &[StepRecord], tol: f64) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.step == y.step
                && x.epoch == y.epoch
                && (x.task_loss - y.task_loss).abs() <= tol
                && (x.distill_loss - y.distill_loss).abs() <= tol
                && (x.diversity_loss - y.diversity_loss).abs() <= tol
                && (x.lr - y.lr).abs() <= tol
        })
}
