//! Metrics report files and line-delimited training logs.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use vidctrl_core::evaluation::MetricsReport;
use vidctrl_core::training::StepLog;

use crate::error::{write_file, Error, Result};

/// One record per `(variant, r_mask)` row, plus optional extra sections.
pub fn report_text(report: &MetricsReport, extra: &[(String, String)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "config_digest: {}", report.config_digest);
    let _ = writeln!(s, "scale: MAE and consistency are multiplied by 100");
    for r in &report.rows {
        let _ = writeln!(s);
        let _ = writeln!(s, "[{} r_mask={}]", r.variant, r.r_mask);
        let _ = writeln!(s, "keyframes: {:?}", r.keyframes);
        let _ = writeln!(s, "mae_x100: {:.4}", r.mae_x100);
        let _ = writeln!(s, "keyframe_mae_x100: {:.4}", r.keyframe_mae_x100);
        let _ = writeln!(s, "consistency_x100: {:.4}", r.consistency_x100);
        let _ = writeln!(s, "off_palette_fraction: {:.4}", r.off_palette_fraction);
        let _ = writeln!(s, "samples: {}", r.samples);
    }
    for (k, v) in extra {
        let _ = writeln!(s);
        let _ = writeln!(s, "[{k}]");
        let _ = writeln!(s, "{v}");
    }
    s
}

pub fn report_csv(report: &MetricsReport) -> String {
    let mut s = String::from("variant,r_mask,keyframes,mae_x100,keyframe_mae_x100,consistency_x100,off_palette_fraction,samples,config_digest\n");
    for r in &report.rows {
        let keys: Vec<String> = r.keyframes.iter().map(|k| k.to_string()).collect();
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
            r.variant,
            r.r_mask,
            keys.join(" "),
            r.mae_x100,
            r.keyframe_mae_x100,
            r.consistency_x100,
            r.off_palette_fraction,
            r.samples,
            report.config_digest
        );
    }
    s
}

/// Writes `report.txt` and `report.csv` under `dir`.
pub fn write_report(dir: &Path, report: &MetricsReport, extra: &[(String, String)]) -> Result<(PathBuf, PathBuf)> {
    let txt = dir.join("report.txt");
    let csv = dir.join("report.csv");
    write_file(&txt, report_text(report, extra).as_bytes())?;
    write_file(&csv, report_csv(report).as_bytes())?;
    Ok((txt, csv))
}

#[derive(Serialize)]
struct LogLine {
    step: usize,
    loss: f64,
    wall_time: f64,
}

/// JSON-lines training log: `{"step": .., "loss": .., "wall_time": ..}` per step.
pub struct TrainingLog {
    path: PathBuf,
    out: BufWriter<File>,
    start: Instant,
    error: Option<std::io::Error>,
}

impl TrainingLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(f), start: Instant::now(), error: None })
    }

    pub fn record(&mut self, s: &StepLog) {
        if self.error.is_some() {
            return;
        }
        let line = LogLine { step: s.step, loss: s.loss, wall_time: self.start.elapsed().as_secs_f64() };
        let json = serde_json::to_string(&line).expect("log line serializes");
        if let Err(e) = writeln!(self.out, "{json}") {
            self.error = Some(e);
        }
    }

    pub fn finish(mut self) -> Result<()> {
        if let Some(e) = self.error.take() {
            return Err(Error::io(&self.path, e));
        }
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}
