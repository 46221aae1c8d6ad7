use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CmstError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Main,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub map_avg: f64,
    pub top1_avg: f64,
}

/// One epoch's mean losses. Fields that do not apply to the phase are null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    /// Zero-based within its phase.
    pub epoch: usize,
    pub l_sia: Option<f64>,
    pub l_lab: Option<f64>,
    pub l_sim: Option<f64>,
    pub l_v: Option<f64>,
    pub l_t: Option<f64>,
    pub l_g: Option<f64>,
    pub l_d: Option<f64>,
    /// Learning rate applied to the Siamese nets this epoch; null when frozen.
    pub siamese_lr: Option<f64>,
    /// SHA-256 of the Siamese parameters at the end of the epoch.
    pub siamese_digest: Option<String>,
    pub eval: Option<EvalSnapshot>,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Append-only JSON-lines metrics file.
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| CmstError::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .append(true)
            .create(true)
            .open(path)
            .map_err(|e| CmstError::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn write(&mut self, record: &EpochRecord) -> Result<()> {
        writeln!(self.file, "{}", record.to_line()).map_err(|e| CmstError::io(&self.path, e))?;
        self.file.flush().map_err(|e| CmstError::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    let file = File::open(path).map_err(|e| CmstError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| CmstError::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
