//! Per-run metric reports, persisted as CSV and mirrored as JSON.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";
const CSV_HEADER: &str = "step,l_f,l_v,l_d,l_tot,d_loss,acc_clean,acc_stamped";

/// One evaluation point. For classifier runs the loss components other than
/// `l_tot` (the minimized objective) are zero.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ReportRow {
    pub step: u64,
    pub l_f: f32,
    pub l_v: f32,
    pub l_d: f32,
    pub l_tot: f32,
    pub d_loss: f32,
    pub acc_clean: f32,
    pub acc_stamped: f32,
}

impl ReportRow {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.l_f,
            self.l_v,
            self.l_d,
            self.l_tot,
            self.d_loss,
            self.acc_clean,
            self.acc_stamped
        )
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunReport {
    pub rows: Vec<ReportRow>,
}

impl RunReport {
    pub fn last(&self) -> Option<&ReportRow> {
        self.rows.last()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.csv_line());
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format(0, format!("report encode: {e}")))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// Incrementally appends CSV rows as training progresses and mirrors the
/// whole report as JSON on `finish`.
pub struct ReportSink {
    pub report: RunReport,
    csv_path: Option<PathBuf>,
    json_path: Option<PathBuf>,
    csv: Option<File>,
}

impl ReportSink {
    /// `dir = None` keeps the report in memory only.
    pub fn new(dir: Option<&Path>) -> Result<Self> {
        let (csv_path, json_path, csv) = match dir {
            Some(d) => {
                fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                let cp = d.join(REPORT_CSV);
                let mut f = OpenOptions::new()
                    .create(true)
                    .write(true)
                    .truncate(true)
                    .open(&cp)
                    .map_err(|e| Error::io(&cp, e))?;
                writeln!(f, "{CSV_HEADER}").map_err(|e| Error::io(&cp, e))?;
                (Some(cp), Some(d.join(REPORT_JSON)), Some(f))
            }
            None => (None, None, None),
        };
        Ok(ReportSink {
            report: RunReport::default(),
            csv_path,
            json_path,
            csv,
        })
    }

    pub fn push(&mut self, row: ReportRow) -> Result<()> {
        if let (Some(f), Some(p)) = (self.csv.as_mut(), self.csv_path.as_ref()) {
            writeln!(f, "{}", row.csv_line()).map_err(|e| Error::io(p, e))?;
            f.flush().map_err(|e| Error::io(p, e))?;
        }
        self.report.rows.push(row);
        Ok(())
    }

    pub fn finish(mut self) -> Result<RunReport> {
        if let Some(p) = self.json_path.take() {
            self.report.write_json(&p)?;
        }
        Ok(self.report)
    }
}
