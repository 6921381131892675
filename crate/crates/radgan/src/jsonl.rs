//! Line-delimited JSON logs, flushed every `interval` records and on drop.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

pub struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<File>,
    interval: u64,
    pending: u64,
}

impl JsonlWriter {
    pub fn create(path: &Path, interval: u64) -> Result<Self> {
        Self::open(path, interval, false)
    }

    /// Appends to an existing log, as a resumed run does.
    pub fn append(path: &Path, interval: u64) -> Result<Self> {
        Self::open(path, interval, true)
    }

    fn open(path: &Path, interval: u64, append: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(Error::io(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            interval: interval.max(1),
            pending: 0,
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n").map_err(Error::io(&self.path))?;
        self.pending += 1;
        if self.pending >= self.interval {
            self.flush()?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.pending = 0;
        self.out.flush().map_err(Error::io(&self.path))
    }
}

impl Drop for JsonlWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

/// Every record in a JSONL file.
pub fn read_records(path: &Path) -> Result<Vec<serde_json::Value>> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
