//! Per-epoch metrics rows, appended to a CSV file.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

use super::LossParts;

pub const METRICS_HEADER: &str = "epoch,split,mode,loss_ce_a,loss_ce_p,loss_mse_logits,loss_mkd,accuracy";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub mode: String,
    pub losses: LossParts,
    /// Dev rows only; training rows leave the column empty.
    pub accuracy: Option<f64>,
}

impl MetricsRow {
    /// Floats use Rust's shortest round-trip formatting; absent components are empty.
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.split,
            self.mode,
            f(self.losses.ce_a),
            f(self.losses.ce_p),
            f(self.losses.mse_logits),
            f(self.losses.mkd),
            f(self.accuracy)
        )
    }
}

/// Appends rows, writing the header first when the file is new or empty.
pub fn append_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let needs_header = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    if needs_header {
        buf.push_str(METRICS_HEADER);
        buf.push('\n');
    }
    for row in rows {
        buf.push_str(&row.to_csv());
        buf.push('\n');
    }
    file.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Replaces `path` with a fresh file holding `rows`.
pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    if path.exists() {
        std::fs::remove_file(path).map_err(|e| Error::io(path, e))?;
    }
    append_metrics(path, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_written_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let row = MetricsRow {
            epoch: 3,
            split: "dev".into(),
            mode: "multimodal".into(),
            losses: LossParts {
                ce_a: Some(0.5),
                ce_p: Some(0.25),
                mse_logits: Some(0.0),
                mkd: None,
            },
            accuracy: Some(0.75),
        };
        append_metrics(&path, std::slice::from_ref(&row)).unwrap();
        append_metrics(&path, &[row]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines, vec![METRICS_HEADER, "3,dev,multimodal,0.5,0.25,0,,0.75", "3,dev,multimodal,0.5,0.25,0,,0.75"]);
    }
}
