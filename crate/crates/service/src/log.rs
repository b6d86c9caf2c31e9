//! Append-only JSON-lines session log. Every state change is written here
//! before the response that reveals it, so the log alone reconstructs all
//! sessions after a restart.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use expo_core::explain::LinearExplanation;
use expo_core::task::{Condition, Direction};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};
use crate::session::Answers;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogRecord {
    SessionCreated {
        session: String,
        index: u64,
        /// The model shown as Condition A.
        condition_a: Condition,
        created_at: u64,
    },
    RoundStarted {
        session: String,
        round: usize,
        round_seed: u64,
    },
    Step {
        session: String,
        round: usize,
        condition: Condition,
        feature: usize,
        direction: Direction,
        prediction_before: f64,
        prediction_after: f64,
        explanation_shown: LinearExplanation,
        /// Whether this press landed the prediction in the target range.
        #[serde(default)]
        solved: bool,
    },
    Abandoned {
        session: String,
        round: usize,
        condition: Condition,
    },
    Questionnaire {
        session: String,
        answers: Answers,
    },
}

impl LogRecord {
    pub fn session(&self) -> &str {
        match self {
            LogRecord::SessionCreated { session, .. }
            | LogRecord::RoundStarted { session, .. }
            | LogRecord::Step { session, .. }
            | LogRecord::Abandoned { session, .. }
            | LogRecord::Questionnaire { session, .. } => session,
        }
    }
}

/// Single exclusive writer; each record is flushed and synced before returning.
#[derive(Debug)]
pub struct LogWriter {
    path: PathBuf,
    file: File,
}

impl LogWriter {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(LogWriter { path, file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, record: &LogRecord) -> Result<()> {
        let mut line = serde_json::to_string(record).map_err(expo_core::Error::from)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.sync_data()?;
        Ok(())
    }
}

/// Read every record; a missing file is an empty log. A torn final line
/// (crash mid-write) is dropped with a warning, any other bad line is an error.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRecord>> {
    let path = path.as_ref();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let lines: Vec<String> = BufReader::new(file).lines().collect::<std::io::Result<_>>()?;
    let mut records = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => records.push(r),
            Err(e) if i + 1 == lines.len() => {
                log::warn!("dropping torn last line of {}: {e}", path.display());
            }
            Err(e) => {
                return Err(ServiceError::Replay(format!(
                    "{} line {}: {e}",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    Ok(records)
}
