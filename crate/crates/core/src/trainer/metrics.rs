//! Per-step metrics stream (JSON lines) and evaluation summaries (CSV).

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::StepRecord;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricLine {
    pub step: u64,
    pub l_c1: f64,
    pub l_c2: f64,
    pub l_sa: f64,
    pub total: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    start: Instant,
    timing: bool,
}

impl MetricsWriter {
    /// With `timing` off every `wall_ms` is written as 0, making the file a
    /// pure function of the run configuration.
    pub fn create(path: &Path, timing: bool) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
            start: Instant::now(),
            timing,
        })
    }

    pub fn line(&self, rec: &StepRecord) -> MetricLine {
        MetricLine {
            step: rec.step,
            l_c1: rec.losses.l_c1,
            l_c2: rec.losses.l_c2,
            l_sa: rec.losses.l_sa,
            total: rec.losses.total,
            lr: rec.lr,
            wall_ms: if self.timing { self.start.elapsed().as_millis() as u64 } else { 0 },
        }
    }

    pub fn record(&mut self, rec: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(&self.line(rec))?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricLine>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub condition: String,
    pub clips: usize,
    pub reference_tokens: usize,
    pub edits: usize,
    pub cer: f64,
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
