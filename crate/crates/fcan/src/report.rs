//! CSV outputs. Floats use Rust's shortest round-trip formatting, so equal
//! values always produce equal bytes.

use std::path::Path;

use fcan_core::eval::IoUReport;
use fcan_core::ran::LossRow;

use crate::error::{AppError, Result};

pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push<S: Into<String>>(&mut self, row: impl IntoIterator<Item = S>) {
        let row: Vec<String> = row.into_iter().map(Into::into).collect();
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let io = |e: csv::Error| AppError::format(path, e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(&self.header).map_err(io)?;
        for r in &self.rows {
            w.write_record(r).map_err(io)?;
        }
        w.flush().map_err(|e| AppError::io(path, e))
    }
}

pub fn losses_table(rows: &[LossRow]) -> Table {
    let mut t = Table::new(["iter", "lr", "L_seg", "L_adv"]);
    for r in rows {
        t.push([
            r.iter.to_string(),
            r.lr.to_string(),
            r.seg.to_string(),
            r.adv.map(|a| a.to_string()).unwrap_or_default(),
        ]);
    }
    t
}

/// One row per class plus a final `mIoU` row; absent classes are `NA`.
pub fn iou_table(report: &IoUReport) -> Table {
    let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| v.to_string());
    let mut t = Table::new(["class", "iou"]);
    for (k, v) in report.per_class.iter().enumerate() {
        t.push([k.to_string(), fmt(*v)]);
    }
    t.push(["mIoU".to_string(), fmt(report.miou)]);
    t
}

/// Percent with two decimals, the precision of the reference column.
pub fn percent(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}
