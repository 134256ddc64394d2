use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: String,
    pub loss: f64,
    pub lr: f64,
    pub frames: usize,
    pub wall_ms: u64,
}

impl StepRecord {
    /// Everything except the wall-clock time, for determinism comparisons.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        self.step == other.step
            && self.phase == other.phase
            && self.loss.to_bits() == other.loss.to_bits()
            && self.lr.to_bits() == other.lr.to_bits()
            && self.frames == other.frames
    }
}

/// Line-delimited JSON sink.
pub struct MetricsLog {
    out: BufWriter<File>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self { out: BufWriter::new(File::create(path)?) })
    }

    /// Appends to an existing log (resumed runs).
    pub fn append(path: &Path) -> Result<Self> {
        Ok(Self { out: BufWriter::new(File::options().create(true).append(true).open(path)?) })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| crate::Error::Io(e.into()))?;
        writeln!(self.out, "{line}")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}
