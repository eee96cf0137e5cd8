//! `metrics.csv` rows and the run manifest.

use std::fs::File;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column order of `metrics.csv`.
pub const METRICS_COLUMNS: [&str; 7] = [
    "experiment_id",
    "task_id",
    "step",
    "loss_kind",
    "loss_value",
    "psnr",
    "wall_ms",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub experiment_id: String,
    pub task_id: String,
    /// Epoch, fine-tuning step or instance index, depending on the run.
    pub step: usize,
    pub loss_kind: String,
    pub loss_value: f64,
    pub psnr: Option<f64>,
    /// Milliseconds since the run started; 0 unless wall-clock recording is on.
    pub wall_ms: u64,
}

/// Append-only CSV writer with a single header.
pub struct MetricsWriter {
    writer: csv::Writer<File>,
    experiment_id: String,
    started: Option<Instant>,
    rows: usize,
}

impl MetricsWriter {
    /// `wall_clock = false` writes 0 in `wall_ms` so reruns are byte-identical.
    pub fn create(path: &Path, experiment_id: &str, wall_clock: bool) -> Result<Self> {
        let file = File::create(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        writer.write_record(METRICS_COLUMNS)?;
        Ok(Self {
            writer,
            experiment_id: experiment_id.to_string(),
            started: wall_clock.then(Instant::now),
            rows: 0,
        })
    }

    pub fn push(
        &mut self,
        task_id: &str,
        step: usize,
        loss_kind: &str,
        loss_value: f64,
        psnr: Option<f64>,
    ) -> Result<()> {
        let wall_ms = self.started.map_or(0, |t| t.elapsed().as_millis() as u64);
        self.writer.serialize(MetricsRow {
            experiment_id: self.experiment_id.clone(),
            task_id: task_id.to_string(),
            step,
            loss_kind: loss_kind.to_string(),
            loss_value,
            psnr,
            wall_ms,
        })?;
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn finish(mut self) -> Result<usize> {
        self.writer.flush()?;
        Ok(self.rows)
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_COLUMNS {
        return Err(Error::Config(format!(
            "{}: unexpected header {header:?}",
            path.display()
        )));
    }
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}
