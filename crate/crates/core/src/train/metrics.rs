//! Append-only CSV metrics log.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "phase,step,lg_vsd,feature,depth,sky,refine,adapter,grad_norm,painter_distance";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepMetrics {
    pub phase: String,
    pub step: usize,
    pub lg_vsd: f64,
    pub feature: f64,
    pub depth: f64,
    pub sky: f64,
    pub refine: f64,
    pub adapter: f64,
    pub grad_norm: f64,
    pub painter_distance: Option<f64>,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        let pd = self.painter_distance.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.phase, self.step, self.lg_vsd, self.feature, self.depth, self.sky, self.refine, self.adapter, self.grad_norm, pd
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct MetricsLog {
    path: Option<PathBuf>,
    pub rows: Vec<StepMetrics>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Appends to `path`, writing the header when the file is new or empty.
    pub fn to_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let fresh = std::fs::metadata(&path).map(|m| m.len() == 0).unwrap_or(true);
        if fresh {
            std::fs::write(&path, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&path, e))?;
        }
        Ok(Self { path: Some(path), rows: Vec::new() })
    }

    pub fn push(&mut self, row: StepMetrics) -> Result<()> {
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
            writeln!(f, "{}", row.csv_row()).map_err(|e| Error::io(path, e))?;
        }
        self.rows.push(row);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn appends_rows_after_one_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        for step in 0..2 {
            let mut log = MetricsLog::to_file(&path).unwrap();
            log.push(StepMetrics { phase: "optimize".into(), step, painter_distance: Some(0.5), ..Default::default() }).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], METRICS_HEADER);
        assert!(lines[2].starts_with("optimize,1,") && lines[2].ends_with("0.500000"));
        assert_eq!(lines[1].split(',').count(), METRICS_HEADER.split(',').count());
    }
}
