//! Append-only metric stream, one JSON object per update.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Component;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// 1-based position in the whole run.
    pub iteration: u64,
    pub stage: String,
    /// `l_pre`, `l_clf`, `l_back`, `d_loss` or `g_loss`.
    pub objective: String,
    /// 1-based count of this objective's updates.
    pub step: u64,
    pub loss: f64,
    pub components: Vec<Component>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lambda: Option<f64>,
}

impl MetricRecord {
    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|c| c.name == name).map(|c| c.value)
    }
}

/// Records kept in memory and, when a path is set, appended to a JSONL file.
pub struct MetricLog {
    path: Option<PathBuf>,
    writer: Option<BufWriter<File>>,
    pub records: Vec<MetricRecord>,
}

impl MetricLog {
    pub fn in_memory() -> Self {
        MetricLog {
            path: None,
            writer: None,
            records: Vec::new(),
        }
    }

    pub fn append_to(path: &Path) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricLog {
            path: Some(path.to_path_buf()),
            writer: Some(BufWriter::new(f)),
            records: Vec::new(),
        })
    }

    pub fn push(&mut self, record: &MetricRecord) -> Result<()> {
        if let Some(w) = &mut self.writer {
            let path = self.path.as_deref().unwrap_or(Path::new("metrics"));
            let mut line = serde_json::to_vec(record)?;
            line.push(b'\n');
            w.write_all(&line).map_err(|e| Error::io(path, e))?;
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        self.records.push(record.clone());
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Vec<MetricRecord>> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut out = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }
}
