//! Append-only JSON-lines table of finished runs.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use lmbench_core::eval::{EvalSpace, MetricsReport};
use lmbench_core::models::{Architecture, EncoderKind};
use lmbench_core::transfer::ChainStart;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const STORE_FILE: &str = "results.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Train,
    Chain,
    Crossval,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub kind: RunKind,
    /// Chain origin and stages (target last); absent outside chains.
    #[serde(default)]
    pub chain_start: Option<ChainStart>,
    #[serde(default)]
    pub chain: Option<Vec<String>>,
    pub dataset: String,
    pub architecture: Architecture,
    pub encoder: EncoderKind,
    pub width_divisor: usize,
    pub imagenet_init: bool,
    pub config_hash: String,
    #[serde(default)]
    pub eval_space: EvalSpace,
    pub metrics: MetricsReport,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl ResultRow {
    /// Stages before the target, e.g. `["chest"]` for a chest-then-head chain.
    pub fn intermediate_stages(&self) -> &[String] {
        match &self.chain {
            Some(c) if !c.is_empty() => &c[..c.len() - 1],
            _ => &[],
        }
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Debug, Clone)]
pub struct ResultsStore {
    path: PathBuf,
}

impl ResultsStore {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            path: dir.join(STORE_FILE),
        }
    }

    pub fn at(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn rows(&self) -> Result<Vec<ResultRow>, CliError> {
        match File::open(&self.path) {
            Ok(f) => read_rows(&self.path, f),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(CliError::io(format!("open {}", self.path.display()), e)),
        }
    }

    pub fn has_config(&self, kind: RunKind, config_hash: &str) -> Result<bool, CliError> {
        Ok(self
            .rows()?
            .iter()
            .any(|r| r.kind == kind && r.config_hash == config_hash))
    }

    /// `base`, or `base-rN` for the first N that is not yet taken.
    pub fn free_run_id(&self, base: &str) -> Result<String, CliError> {
        let rows = self.rows()?;
        let taken = |id: &str| rows.iter().any(|r| r.run_id == id);
        if !taken(base) {
            return Ok(base.to_string());
        }
        Ok((2..)
            .map(|n| format!("{base}-r{n}"))
            .find(|id| !taken(id))
            .expect("unbounded search"))
    }

    /// Appends one row under an exclusive file lock. Fails if the run id
    /// is already present.
    pub fn append(&self, row: &ResultRow) -> Result<(), CliError> {
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(format!("create {}", dir.display()), e))?;
        }
        let ctx = || format!("append to {}", self.path.display());
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&self.path)
            .map_err(|e| CliError::io(ctx(), e))?;
        file.lock().map_err(|e| CliError::io(ctx(), e))?;
        let existing = read_rows(&self.path, file.try_clone().map_err(|e| CliError::io(ctx(), e))?)?;
        if existing.iter().any(|r| r.run_id == row.run_id) {
            return Err(CliError::validation(format!("run id {} already recorded", row.run_id)));
        }
        let mut line = serde_json::to_string(row).map_err(CliError::validation)?;
        line.push('\n');
        file.write_all(line.as_bytes()).map_err(|e| CliError::io(ctx(), e))?;
        file.flush().map_err(|e| CliError::io(ctx(), e))?;
        file.unlock().map_err(|e| CliError::io(ctx(), e))
    }
}

fn read_rows(path: &Path, file: File) -> Result<Vec<ResultRow>, CliError> {
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(format!("read {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| {
            CliError::validation(format!("{} line {}: {e}", path.display(), i + 1))
        })?;
        rows.push(row);
    }
    Ok(rows)
}
