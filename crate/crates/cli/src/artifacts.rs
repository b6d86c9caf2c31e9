//! Atomic file output and the on-disk checkpoint format.

use std::io::Write;
use std::path::{Path, PathBuf};

use expo_core::engine::{MlpModel, TrainConfig};
use expo_core::regularize::{CalibratedWeight, RegularizerKind};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Write `bytes` to a temporary file beside `path`, then rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact types serialize");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(CliError::Missing(path.into())),
        Err(e) => return Err(CliError::io(path, e)),
    };
    serde_json::from_str(&text).map_err(|source| CliError::Artifact { path: path.into(), source })
}

/// Create `dir` if needed and prove it accepts new files.
pub fn ensure_writable_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    Ok(())
}

/// One grid cell: a regularizer at a relative weight, an architecture and a
/// trial seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub kind: RegularizerKind,
    /// Absent for the unregularized model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_weight: Option<f64>,
    pub width: usize,
    pub depth: usize,
    pub seed: u64,
}

impl Cell {
    /// File stem, unique per cell.
    pub fn name(&self) -> String {
        match self.relative_weight {
            Some(w) => format!("{}-w{w}-{}x{}-s{}", self.kind, self.width, self.depth, self.seed),
            None => format!("{}-{}x{}-s{}", self.kind, self.width, self.depth, self.seed),
        }
    }

    pub fn layer_widths(&self, inputs: usize, outputs: usize) -> Vec<usize> {
        let mut w = vec![inputs];
        w.extend(std::iter::repeat_n(self.width, self.depth));
        w.push(outputs);
        w
    }
}

/// A trained model with everything needed to reproduce and evaluate it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub cell: Cell,
    /// Seed of the train/validation/test split the model saw.
    pub split_seed: u64,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibratedWeight>,
    pub val_loss: f64,
    pub model: MlpModel,
}

impl CheckpointFile {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

pub fn checkpoint_path(run_dir: &Path, cell: &Cell) -> PathBuf {
    run_dir.join("checkpoints").join(format!("{}.json", cell.name()))
}

pub fn history_path(run_dir: &Path, cell: &Cell) -> PathBuf {
    run_dir.join("history").join(format!("{}.jsonl", cell.name()))
}
