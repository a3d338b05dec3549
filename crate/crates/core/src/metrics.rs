//! Append-only JSONL metrics stream.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub method: String,
    pub stage: String,
    pub step: usize,
    pub name: String,
    /// `None` encodes a non-finite value (serialized as JSON null).
    pub value: Option<f64>,
    pub seed: u64,
    pub wall_time: f64,
}

/// Buffered line-oriented sink; every emit appends exactly one JSON object.
pub struct MetricsSink {
    writer: BufWriter<File>,
    /// Count of values replaced by null because they were non-finite.
    pub non_finite_warnings: usize,
    pub emitted: usize,
}

impl MetricsSink {
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { writer: BufWriter::new(file), non_finite_warnings: 0, emitted: 0 })
    }

    pub fn emit(&mut self, mut record: MetricRecord) -> Result<()> {
        if let Some(v) = record.value {
            if !v.is_finite() {
                record.value = None;
                self.non_finite_warnings += 1;
            }
        }
        serde_json::to_writer(&mut self.writer, &record)?;
        self.writer.write_all(b"\n")?;
        self.emitted += 1;
        Ok(())
    }

    /// Flush; call at stage boundaries and before drop.
    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
