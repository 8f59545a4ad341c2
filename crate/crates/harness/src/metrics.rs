//! Metrics CSV with a header fixed by the network layout.
//!
//! Wall-clock time lives in a separate `timing.csv` so that `metrics.csv` is
//! byte-identical across runs with the same seed.

use std::fs::File;
use std::path::Path;

use dcnet::nn::LayerStats;

use crate::error::{io_err, HarnessError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_loss: f64,
    pub eval_acc: f64,
    pub layers: Vec<LayerStats>,
}

impl MetricsRow {
    pub fn is_finite(&self) -> bool {
        [
            self.train_loss,
            self.train_acc,
            self.eval_loss,
            self.eval_acc,
        ]
        .into_iter()
        .chain(self.layers.iter().map(|l| l.mean_w_norm))
        .chain(self.layers.iter().filter_map(|l| l.mean_rho))
        .all(f64::is_finite)
    }
}

/// `step,train_loss,train_acc,eval_loss,eval_acc`, then `w_norm_<i>` for every
/// layer with kernels and `rho_<i>` for every layer with a radius.
pub fn header(layers: &[LayerStats]) -> Vec<String> {
    let mut h: Vec<String> = ["step", "train_loss", "train_acc", "eval_loss", "eval_acc"]
        .map(String::from)
        .to_vec();
    h.extend(layers.iter().map(|l| format!("w_norm_{}", l.index)));
    h.extend(
        layers
            .iter()
            .filter(|l| l.mean_rho.is_some())
            .map(|l| format!("rho_{}", l.index)),
    );
    h
}

fn fmt(v: f64) -> String {
    format!("{v:.8}")
}

pub fn record(row: &MetricsRow) -> Vec<String> {
    let mut r = vec![
        row.step.to_string(),
        fmt(row.train_loss),
        fmt(row.train_acc),
        fmt(row.eval_loss),
        fmt(row.eval_acc),
    ];
    r.extend(row.layers.iter().map(|l| fmt(l.mean_w_norm)));
    r.extend(row.layers.iter().filter_map(|l| l.mean_rho).map(fmt));
    r
}

pub struct MetricsWriter {
    metrics: csv::Writer<File>,
    timing: csv::Writer<File>,
    last_step: Option<usize>,
}

impl MetricsWriter {
    pub fn create(dir: &Path, layers: &[LayerStats]) -> Result<Self> {
        let open = |name: &str| -> Result<csv::Writer<File>> {
            let path = dir.join(name);
            Ok(csv::Writer::from_writer(
                File::create(&path).map_err(io_err(path))?,
            ))
        };
        let mut metrics = open("metrics.csv")?;
        metrics.write_record(header(layers))?;
        metrics.flush().map_err(io_err(dir.join("metrics.csv")))?;
        let mut timing = open("timing.csv")?;
        timing.write_record(["step", "wall_time"])?;
        Ok(Self {
            metrics,
            timing,
            last_step: None,
        })
    }

    pub fn write(&mut self, row: &MetricsRow, wall_time: f64) -> Result<()> {
        if self.last_step.is_some_and(|s| row.step <= s) {
            return Err(HarnessError::Config(format!(
                "metrics step {} is not increasing",
                row.step
            )));
        }
        self.last_step = Some(row.step);
        self.metrics.write_record(record(row))?;
        self.metrics
            .flush()
            .map_err(|e| HarnessError::Csv(e.into()))?;
        self.timing
            .write_record([row.step.to_string(), format!("{wall_time:.3}")])?;
        self.timing
            .flush()
            .map_err(|e| HarnessError::Csv(e.into()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats() -> Vec<LayerStats> {
        vec![
            LayerStats {
                index: 0,
                kind: "decoupled-conv",
                mean_w_norm: 1.5,
                mean_rho: Some(1.0),
            },
            LayerStats {
                index: 4,
                kind: "fc",
                mean_w_norm: 0.25,
                mean_rho: None,
            },
        ]
    }

    #[test]
    fn header_and_record_line_up() {
        let h = header(&stats());
        assert_eq!(
            h.join(","),
            "step,train_loss,train_acc,eval_loss,eval_acc,w_norm_0,w_norm_4,rho_0"
        );
        let row = MetricsRow {
            step: 10,
            train_loss: 0.5,
            train_acc: 0.75,
            eval_loss: 0.625,
            eval_acc: 0.8,
            layers: stats(),
        };
        assert!(row.is_finite());
        let r = record(&row);
        assert_eq!(r.len(), h.len());
        assert_eq!(r[0], "10");
        assert_eq!(r[7], "1.00000000");
    }

    #[test]
    fn steps_must_increase() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = MetricsWriter::create(dir.path(), &stats()).unwrap();
        let mut row = MetricsRow {
            step: 5,
            train_loss: 1.0,
            train_acc: 0.0,
            eval_loss: 1.0,
            eval_acc: 0.0,
            layers: stats(),
        };
        w.write(&row, 0.1).unwrap();
        assert!(w.write(&row, 0.2).is_err());
        row.step = 6;
        w.write(&row, 0.3).unwrap();
        let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(text.lines().count(), 3);
    }
}
