//! Metrics and score CSV files with fixed headers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::Result;

pub const METRICS_HEADER: &str = "epoch,split,acc,auc,l_c,l_ssim,l_pmse,total";
pub const SCORES_HEADER: &str = "item_id,label,score";

#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub acc: f64,
    pub auc: f64,
    pub l_c: f64,
    pub l_ssim: f64,
    pub l_pmse: f64,
    pub total: f64,
}

impl MetricsRow {
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.split,
            self.acc,
            self.auc,
            self.l_c,
            self.l_ssim,
            self.l_pmse,
            self.total
        )
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for row in rows {
        let _ = writeln!(out, "{}", row.to_line());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_scores(path: &Path, rows: &[(String, u8, f64)]) -> Result<()> {
    let mut out = String::from(SCORES_HEADER);
    out.push('\n');
    for (id, label, score) in rows {
        let _ = writeln!(out, "{id},{label},{score}");
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parses a scores CSV back into rows (used by tests and reporting).
pub fn read_scores(path: &Path) -> Result<Vec<(String, u8, f64)>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() == 3 {
            rows.push((
                cols[0].to_string(),
                cols[1].parse().unwrap_or(0),
                cols[2].parse().unwrap_or(0.0),
            ));
        }
    }
    Ok(rows)
}
