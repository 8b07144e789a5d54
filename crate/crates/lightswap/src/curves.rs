//! Loss curves as long-format CSV: `step,term,value`.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use lightswap_core::losses::LossReport;

use crate::error::{Error, Result};

pub const HEADER: [&str; 3] = ["step", "term", "value"];

pub struct CurveWriter {
    path: PathBuf,
    inner: csv::Writer<File>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, e.into())
}

impl CurveWriter {
    /// Starts a new file, replacing any existing one.
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut inner = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        inner.write_record(HEADER).map_err(|e| csv_err(path, e))?;
        Ok(CurveWriter { path: path.to_path_buf(), inner })
    }

    /// Continues a file after a resume at `step`, dropping rows of later
    /// steps that an interrupted run may have left behind.
    pub fn resume(path: &Path, step: u64) -> Result<Self> {
        let kept: Vec<CurveRow> = if path.exists() {
            read(path)?.into_iter().filter(|r| r.step <= step).collect()
        } else {
            Vec::new()
        };
        let mut w = Self::create(path)?;
        for r in kept {
            w.row(r.step, &r.term, r.value)?;
        }
        w.flush()?;
        let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(CurveWriter { path: path.to_path_buf(), inner: csv::Writer::from_writer(file) })
    }

    fn row(&mut self, step: u64, term: &str, value: f64) -> Result<()> {
        let path = &self.path;
        self.inner.write_record([step.to_string(), term.to_string(), value.to_string()]).map_err(|e| csv_err(path, e))
    }

    pub fn record(&mut self, step: u64, report: &LossReport) -> Result<()> {
        for (term, value) in report.terms() {
            self.row(step, term, value)?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub step: u64,
    pub term: String,
    pub value: f64,
}

pub fn read(path: &Path) -> Result<Vec<CurveRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |m: String| Error::File { path: path.to_path_buf(), source: lightswap_core::Error::Parse { line, message: m } };
        if rec.len() != 3 {
            return Err(bad(format!("expected 3 fields, got {}", rec.len())));
        }
        let step = rec[0].parse().map_err(|_| bad(format!("bad step `{}`", &rec[0])))?;
        let value = rec[2].parse().map_err(|_| bad(format!("bad value `{}`", &rec[2])))?;
        out.push(CurveRow { step, term: rec[1].to_string(), value });
    }
    Ok(out)
}

/// Values of one term, in file order.
pub fn series(rows: &[CurveRow], term: &str) -> Vec<(u64, f64)> {
    rows.iter().filter(|r| r.term == term).map(|r| (r.step, r.value)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_resume_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("losses.csv");
        let mut w = CurveWriter::create(&p).unwrap();
        for s in 1..=3 {
            w.record(s, &LossReport { rec: s as f64 / 10.0, ..LossReport::default() }).unwrap();
        }
        w.flush().unwrap();
        drop(w);
        let mut w = CurveWriter::resume(&p, 2).unwrap();
        w.record(3, &LossReport { rec: 0.25, ..LossReport::default() }).unwrap();
        w.flush().unwrap();
        let rows = read(&p).unwrap();
        assert_eq!(series(&rows, "rec"), vec![(1, 0.1), (2, 0.2), (3, 0.25)]);
        assert_eq!(rows.len(), 3 * LossReport::default().terms().len());
        assert!(rows.windows(2).all(|w| w[0].step <= w[1].step));
    }
}
