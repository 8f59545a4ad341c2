//! Merges per-run metrics into one long-format CSV.

use std::io::Write;
use std::path::Path;

use crate::error::{HarnessError, Result};

/// Writes `run,step,metric,value` rows for every `metrics.csv` under `runs`.
/// The run name is the directory's file name.
pub fn export_long<W: Write>(runs: &[&Path], out: W) -> Result<usize> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(["run", "step", "metric", "value"])?;
    let mut rows = 0;
    for dir in runs {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let path = dir.join("metrics.csv");
        let mut reader = csv::Reader::from_path(&path)?;
        let header = reader.headers()?.clone();
        if header.get(0) != Some("step") {
            return Err(HarnessError::Format {
                path,
                message: "first column must be `step`".into(),
            });
        }
        for record in reader.records() {
            let record = record?;
            let step = &record[0];
            for (metric, value) in header.iter().zip(record.iter()).skip(1) {
                writer.write_record([name.as_str(), step, metric, value])?;
                rows += 1;
            }
        }
    }
    writer.flush().map_err(|e| HarnessError::Csv(e.into()))?;
    Ok(rows)
}
