use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

/// One line of `metrics.log`. `step` counts optimizer steps within the
/// phase, from 1; `phase` counts from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub phase: usize,
    pub l_mlm: f64,
    pub l_rtd: f64,
    pub combined: f64,
    pub lr: f64,
    pub tokens_seen: u64,
    pub wall_ms: u64,
    pub disc_accuracy: f64,
}

impl MetricsRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }

    pub fn parse(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Config(format!("metrics line {line:?}: {e}")))
    }

    /// Same record with the timing field cleared, for comparisons across runs.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_ms: 0,
            ..self.clone()
        }
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(MetricsRecord::parse)
        .collect()
}

/// Appends records, flushing after each so an interrupted run keeps every
/// completed step.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl MetricsWriter {
    /// Opens `path` for appending after dropping any records past
    /// `(phase, step)`, which a later run will regenerate.
    pub fn resume(path: &Path, phase: usize, step: u64) -> Result<Self> {
        if path.exists() {
            let kept: Vec<MetricsRecord> = read_metrics(path)?
                .into_iter()
                .filter(|r| (r.phase, r.step) <= (phase, step))
                .collect();
            let mut text = String::new();
            for r in &kept {
                text.push_str(&r.to_line());
                text.push('\n');
            }
            std::fs::write(path, text).map_err(io_err(path))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        Ok(Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, r: &MetricsRecord) -> Result<()> {
        writeln!(self.out, "{}", r.to_line()).map_err(io_err(&self.path))?;
        self.out.flush().map_err(io_err(&self.path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(phase: usize, step: u64) -> MetricsRecord {
        MetricsRecord {
            step,
            phase,
            l_mlm: 1.5,
            l_rtd: 0.25,
            combined: 14.0,
            lr: 1e-3,
            tokens_seen: step * 10,
            wall_ms: 3,
            disc_accuracy: 0.9,
        }
    }

    #[test]
    fn line_roundtrip_has_every_field() {
        let r = rec(1, 4);
        let line = r.to_line();
        for f in ["step", "phase", "l_mlm", "l_rtd", "combined", "lr", "tokens_seen", "wall_ms", "disc_accuracy"] {
            assert!(line.contains(&format!("\"{f}\":")), "{line}");
        }
        assert_eq!(MetricsRecord::parse(&line).unwrap(), r);
    }

    #[test]
    fn resume_truncates_later_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.log");
        let mut w = MetricsWriter::resume(&path, 1, 0).unwrap();
        for (p, s) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            w.write(&rec(p, s)).unwrap();
        }
        drop(w);
        let mut w = MetricsWriter::resume(&path, 2, 1).unwrap();
        w.write(&rec(2, 2)).unwrap();
        drop(w);
        let steps: Vec<_> = read_metrics(&path).unwrap().iter().map(|r| (r.phase, r.step)).collect();
        assert_eq!(steps, [(1, 1), (1, 2), (2, 1), (2, 2)]);
    }
}
