//! Append-only JSONL event log. The pool state of a run is a fold over it.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::RoundReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RunEvent {
    Started {
        config_digest: String,
        pool_size: usize,
        test_size: usize,
    },
    /// The random round-0 batch.
    Seeded { pair_ids: Vec<String> },
    Labeled {
        round: usize,
        pair_id: String,
        label: u8,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        annotator: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        submitted_at: Option<String>,
    },
    /// Round boundary: the round's model is trained and checkpointed, the
    /// test set evaluated and the next batch (`report.selected`) issued.
    RoundCompleted { report: RoundReport },
    Finished,
}

/// Durable event log: each append is flushed to disk before returning.
#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
}

impl EventLog {
    /// Opens (creating if needed) the log for appending.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { path, file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, event: &RunEvent) -> Result<()> {
        let mut line = serde_json::to_vec(event)?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| Error::io(&self.path, e))?;
        self.file.sync_data().map_err(|e| Error::io(&self.path, e))
    }

    /// Reads every event. A torn final line (crash mid-write) is ignored;
    /// a malformed line anywhere else is an error.
    pub fn read(path: impl AsRef<Path>) -> Result<Vec<RunEvent>> {
        let path = path.as_ref();
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(path, e)),
        };
        let lines: Vec<String> = BufReader::new(file)
            .lines()
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(path, e))?;
        let mut events = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(line) {
                Ok(ev) => events.push(ev),
                Err(e) if i + 1 == lines.len() => log::warn!("ignoring torn last line of {}: {e}", path.display()),
                Err(e) => return Err(Error::Replay(format!("{} line {}: {e}", path.display(), i + 1))),
            }
        }
        Ok(events)
    }
}
