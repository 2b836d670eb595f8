//! Append-only training metrics CSV.

use std::io::Write;
use std::path::Path;

use super::{HarnessError, Result};

pub const CSV_HEADER: &str =
    "step,adv_g,adv_d,sq,uniformity,qcr,usage,mode_coverage,kernel_mmd,mean_cos_sim";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub adv_g: f64,
    pub adv_d: f64,
    pub sq: f64,
    pub uniformity: f64,
    pub qcr: f64,
    pub usage: f64,
    pub mode_coverage: f64,
    pub kernel_mmd: f64,
    pub mean_cos_sim: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.adv_g,
            self.adv_d,
            self.sq,
            self.uniformity,
            self.qcr,
            self.usage,
            self.mode_coverage,
            self.kernel_mmd,
            self.mean_cos_sim
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 10 {
            return Err(HarnessError::Config(format!(
                "metrics row has {} fields, expected 10: {line}",
                parts.len()
            )));
        }
        let f = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| HarnessError::Config(format!("bad metrics value `{s}`")))
        };
        Ok(MetricsRow {
            step: parts[0]
                .parse()
                .map_err(|_| HarnessError::Config(format!("bad step `{}`", parts[0])))?,
            adv_g: f(parts[1])?,
            adv_d: f(parts[2])?,
            sq: f(parts[3])?,
            uniformity: f(parts[4])?,
            qcr: f(parts[5])?,
            usage: f(parts[6])?,
            mode_coverage: f(parts[7])?,
            kernel_mmd: f(parts[8])?,
            mean_cos_sim: f(parts[9])?,
        })
    }
}

/// Writes the header on creation and flushes after every row, so the file
/// parses as CSV at any point during a run.
pub struct MetricsWriter {
    file: std::io::BufWriter<std::fs::File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, "{CSV_HEADER}")?;
        file.flush()?;
        Ok(MetricsWriter { file })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.file, "{}", row.to_csv())?;
        self.file.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(HarnessError::Config(format!(
                "metrics file {} has wrong header: {:?}",
                path.display(),
                other
            )))
        }
    }
    lines.map(MetricsRow::from_csv).collect()
}
