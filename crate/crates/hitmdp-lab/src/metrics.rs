//! Metrics CSV writing and the replay summary. Floats are written with
//! Rust's shortest round-trip formatting, so identical runs produce
//! byte-identical files.

use crate::error::LabError;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// Column schema of the agent-training metrics file.
pub const VMOC_HEADER: &str =
    "step,ret_mean,ret_std,loss_qa,loss_qo,loss_pa,loss_po,alpha_a,alpha_o,ent_a,ent_o";

/// Sliding-window length used for smoothed reporting.
pub const SMOOTHING_WINDOW: usize = 20;

/// Accumulates CSV text in memory; written to disk in one shot so partial
/// files never appear.
#[derive(Clone, Debug)]
pub struct CsvBuffer {
    text: String,
    columns: usize,
}

impl CsvBuffer {
    pub fn new(header: &str) -> Self {
        let mut text = String::with_capacity(4096);
        text.push_str(header);
        text.push('\n');
        CsvBuffer { text, columns: header.split(',').count() }
    }

    pub fn push_row(&mut self, fields: &[String]) {
        assert_eq!(fields.len(), self.columns, "row width must match header");
        self.text.push_str(&fields.join(","));
        self.text.push('\n');
    }

    pub fn push_f64_row(&mut self, fields: &[f64]) {
        let rendered: Vec<String> = fields.iter().map(|v| fmt_f64(*v)).collect();
        self.push_row(&rendered);
    }

    pub fn write(&self, path: &Path) -> Result<(), LabError> {
        std::fs::write(path, &self.text)?;
        Ok(())
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }
}

/// Shortest round-trip decimal rendering (deterministic for equal bits).
pub fn fmt_f64(v: f64) -> String {
    let mut s = String::new();
    write!(s, "{v}").expect("formatting f64 cannot fail");
    s
}

/// One parsed row of the agent metrics schema.
#[derive(Clone, Copy, Debug)]
pub struct VmocRow {
    pub step: f64,
    pub ret_mean: f64,
    pub ret_std: f64,
    pub loss_qa: f64,
    pub loss_qo: f64,
    pub loss_pa: f64,
    pub loss_po: f64,
    pub alpha_a: f64,
    pub alpha_o: f64,
    pub ent_a: f64,
    pub ent_o: f64,
}

pub fn parse_vmoc_csv(text: &str) -> Result<Vec<VmocRow>, LabError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == VMOC_HEADER => {}
        Some((_, header)) => {
            return Err(LabError::Config(format!(
                "metrics header mismatch: expected {VMOC_HEADER:?}, got {header:?}"
            )))
        }
        None => return Err(LabError::Config("metrics file is empty".into())),
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(LabError::Config(format!(
                "metrics line {}: expected 11 fields, got {}",
                idx + 1,
                fields.len()
            )));
        }
        let parse = |f: &str| -> Result<f64, LabError> {
            f.parse::<f64>().map_err(|_| {
                LabError::Config(format!("metrics line {}: bad number {f:?}", idx + 1))
            })
        };
        rows.push(VmocRow {
            step: parse(fields[0])?,
            ret_mean: parse(fields[1])?,
            ret_std: parse(fields[2])?,
            loss_qa: parse(fields[3])?,
            loss_qo: parse(fields[4])?,
            loss_pa: parse(fields[5])?,
            loss_po: parse(fields[6])?,
            alpha_a: parse(fields[7])?,
            alpha_o: parse(fields[8])?,
            ent_a: parse(fields[9])?,
            ent_o: parse(fields[10])?,
        });
    }
    if rows.is_empty() {
        return Err(LabError::Config("metrics file has no rows".into()));
    }
    Ok(rows)
}

/// Trailing sliding-window mean of the final `SMOOTHING_WINDOW` values
/// (all values when fewer exist).
pub fn smoothed_tail(values: &[f64]) -> f64 {
    let n = values.len().min(SMOOTHING_WINDOW);
    let tail = &values[values.len() - n..];
    tail.iter().sum::<f64>() / n as f64
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Trend {
    pub first: f64,
    pub last: f64,
}

/// Machine-readable replay summary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReplaySummary {
    pub rows: usize,
    pub final_return: f64,
    pub best_return: f64,
    pub smoothed_final_return: f64,
    pub smoothing_window: usize,
    pub loss_qa: Trend,
    pub loss_qo: Trend,
    pub loss_pa: Trend,
    pub loss_po: Trend,
    pub alpha_a: Trend,
    pub alpha_o: Trend,
    pub ent_a: Trend,
    pub ent_o: Trend,
}

pub fn summarize(rows: &[VmocRow]) -> ReplaySummary {
    let returns: Vec<f64> = rows.iter().map(|r| r.ret_mean).collect();
    let trend = |get: fn(&VmocRow) -> f64| Trend {
        first: get(&rows[0]),
        last: get(rows.last().expect("non-empty rows")),
    };
    ReplaySummary {
        rows: rows.len(),
        final_return: *returns.last().expect("non-empty"),
        best_return: returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        smoothed_final_return: smoothed_tail(&returns),
        smoothing_window: SMOOTHING_WINDOW,
        loss_qa: trend(|r| r.loss_qa),
        loss_qo: trend(|r| r.loss_qo),
        loss_pa: trend(|r| r.loss_pa),
        loss_po: trend(|r| r.loss_po),
        alpha_a: trend(|r| r.alpha_a),
        alpha_o: trend(|r| r.alpha_o),
        ent_a: trend(|r| r.ent_a),
        ent_o: trend(|r| r.ent_o),
    }
}

/// Aligned text rendering of a summary.
pub fn render_summary(summary: &ReplaySummary) -> String {
    let mut lines: Vec<(String, String)> = vec![
        ("rows".into(), summary.rows.to_string()),
        ("final_return".into(), fmt_f64(summary.final_return)),
        ("best_return".into(), fmt_f64(summary.best_return)),
        (
            format!("smoothed_final_return(w={})", summary.smoothing_window),
            fmt_f64(summary.smoothed_final_return),
        ),
    ];
    for (name, t) in [
        ("loss_qa", summary.loss_qa),
        ("loss_qo", summary.loss_qo),
        ("loss_pa", summary.loss_pa),
        ("loss_po", summary.loss_po),
        ("alpha_a", summary.alpha_a),
        ("alpha_o", summary.alpha_o),
        ("ent_a", summary.ent_a),
        ("ent_o", summary.ent_o),
    ] {
        lines.push((format!("{name}(first->last)"), format!("{} -> {}", fmt_f64(t.first), fmt_f64(t.last))));
    }
    let width = lines.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (k, v) in lines {
        let _ = writeln!(out, "{k:<width$}  {v}");
    }
    out
}
