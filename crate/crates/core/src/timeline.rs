//! Turns the per-frame prediction stream into task events.
//!
//! An event starts at the first detection of a run of equal labels and ends
//! at the first detection of the next run. The last run of a stream is left
//! open (incomplete).

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::anomaly::{AnomalyRecord, Verdict};
use crate::error::TimelineError;
use crate::types::TaskLabel;

/// Default stream tick: 10 ms.
pub const DEFAULT_TICK_SECONDS: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detection {
    pub id: u64,
    pub ts: u64,
    pub label: TaskLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskEvent {
    pub label: TaskLabel,
    pub start_id: u64,
    pub start_ts: u64,
    /// First detection of the following event; `None` while open.
    pub end_ts: Option<u64>,
    pub processing_time: Option<f64>,
}

impl TaskEvent {
    pub fn complete(&self) -> bool {
        self.end_ts.is_some()
    }
}

/// Holds a label change back until `m` consecutive detections agree on it.
#[derive(Debug, Clone)]
pub struct Debouncer {
    m: usize,
    current: Option<TaskLabel>,
    pending: Option<(TaskLabel, usize)>,
}

impl Debouncer {
    pub fn new(m: usize) -> Result<Self, TimelineError> {
        if m == 0 {
            return Err(TimelineError::ZeroDebounce);
        }
        Ok(Debouncer { m, current: None, pending: None })
    }

    pub fn push(&mut self, d: Detection) -> Detection {
        let Some(current) = self.current else {
            self.current = Some(d.label);
            return d;
        };
        if d.label == current {
            self.pending = None;
            return d;
        }
        let run = match self.pending {
            Some((l, n)) if l == d.label => n + 1,
            _ => 1,
        };
        if run >= self.m {
            self.current = Some(d.label);
            self.pending = None;
            d
        } else {
            self.pending = Some((d.label, run));
            Detection { label: current, ..d }
        }
    }
}

pub fn debounce(detections: &[Detection], m: usize) -> Result<Vec<Detection>, TimelineError> {
    let mut deb = Debouncer::new(m)?;
    Ok(detections.iter().map(|&d| deb.push(d)).collect())
}

/// Incremental run-length segmenter.
#[derive(Debug, Clone)]
pub struct Segmenter {
    tick_seconds: f64,
    open: Option<TaskEvent>,
}

impl Segmenter {
    pub fn new(tick_seconds: f64) -> Self {
        assert!(tick_seconds > 0.0, "tick_seconds must be positive");
        Segmenter { tick_seconds, open: None }
    }

    /// Feeds one detection; returns the event it closes, if any.
    pub fn push(&mut self, d: Detection) -> Option<TaskEvent> {
        match self.open {
            Some(ev) if ev.label == d.label => None,
            prev => {
                self.open = Some(TaskEvent {
                    label: d.label,
                    start_id: d.id,
                    start_ts: d.ts,
                    end_ts: None,
                    processing_time: None,
                });
                prev.map(|ev| TaskEvent {
                    end_ts: Some(d.ts),
                    processing_time: Some(d.ts.saturating_sub(ev.start_ts) as f64 * self.tick_seconds),
                    ..ev
                })
            }
        }
    }

    pub fn open_event(&self) -> Option<&TaskEvent> {
        self.open.as_ref()
    }

    /// The still-open final event.
    pub fn finish(self) -> Option<TaskEvent> {
        self.open
    }
}

pub fn segment(detections: &[Detection], tick_seconds: f64) -> Vec<TaskEvent> {
    let mut seg = Segmenter::new(tick_seconds);
    let mut events: Vec<TaskEvent> = detections.iter().filter_map(|&d| seg.push(d)).collect();
    events.extend(seg.finish());
    events
}

/// One report line.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub id: u64,
    pub ts: u64,
    pub task: TaskLabel,
    pub processing_time: Option<f64>,
    pub range: Option<(f64, f64)>,
    pub abnormality: Verdict,
    pub model_version: Option<u64>,
}

/// Pairs complete events with their verdicts; open events print NA.
pub fn emit_rows(events: &[TaskEvent], verdicts: &[AnomalyRecord]) -> Result<Vec<ReportRow>, TimelineError> {
    let complete = events.iter().filter(|e| e.complete()).count();
    if complete != verdicts.len() {
        return Err(TimelineError::LengthMismatch { events: complete, verdicts: verdicts.len() });
    }
    let mut verdicts = verdicts.iter();
    Ok(events
        .iter()
        .map(|ev| {
            if ev.complete() {
                let rec = verdicts.next().expect("counted above");
                row_for(ev, Some(rec), None)
            } else {
                row_for(ev, None, None)
            }
        })
        .collect())
}

pub fn row_for(ev: &TaskEvent, rec: Option<&AnomalyRecord>, model_version: Option<u64>) -> ReportRow {
    ReportRow {
        id: ev.start_id,
        ts: ev.start_ts,
        task: ev.label,
        processing_time: ev.processing_time,
        range: rec.and_then(|r| r.interval).map(|i| (i.lo, i.hi)),
        abnormality: rec.map_or(Verdict::NA, |r| r.verdict),
        model_version,
    }
}

pub const REPORT_COLUMNS: [&str; 6] = [
    "ID",
    "Time Stamp",
    "Detected Task",
    "Processing Time (s)",
    "Acceptance Range",
    "Detected Abnormality",
];
pub const VERSION_COLUMN: &str = "Model Version";

impl ReportRow {
    fn cells(&self, with_version: bool) -> Vec<String> {
        let mut c = vec![
            self.id.to_string(),
            self.ts.to_string(),
            self.task.display_name().to_string(),
            self.processing_time.map_or("NA".into(), |p| format!("{p:.2}")),
            self.range.map_or("NA".into(), |(lo, hi)| format!("[{lo:.2}, {hi:.2}]")),
            self.abnormality.as_str().to_string(),
        ];
        if with_version {
            c.push(self.model_version.map(|v| v.to_string()).unwrap_or_default());
        }
        c
    }
}

fn header(with_version: bool) -> Vec<&'static str> {
    let mut h = REPORT_COLUMNS.to_vec();
    if with_version {
        h.push(VERSION_COLUMN);
    }
    h
}

/// CSV report. The version column appears when any row carries a version.
pub fn write_csv<W: Write>(out: W, rows: &[ReportRow]) -> csv::Result<()> {
    let with_version = rows.iter().any(|r| r.model_version.is_some());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(with_version))?;
    for r in rows {
        w.write_record(r.cells(with_version))?;
    }
    w.flush()?;
    Ok(())
}

/// Row-at-a-time CSV report; the header goes out on creation and every row
/// is flushed as soon as it is written.
pub struct CsvRowWriter<W: Write> {
    w: csv::Writer<W>,
    with_version: bool,
}

impl<W: Write> CsvRowWriter<W> {
    pub fn new(out: W, with_version: bool) -> csv::Result<Self> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(header(with_version))?;
        w.flush()?;
        Ok(CsvRowWriter { w, with_version })
    }

    pub fn write(&mut self, row: &ReportRow) -> csv::Result<()> {
        self.w.write_record(row.cells(self.with_version))?;
        self.w.flush()?;
        Ok(())
    }
}

/// Column-aligned plain-text table.
pub fn render_text(rows: &[ReportRow]) -> String {
    let with_version = rows.iter().any(|r| r.model_version.is_some());
    let head: Vec<String> = header(with_version).into_iter().map(String::from).collect();
    let body: Vec<Vec<String>> = rows.iter().map(|r| r.cells(with_version)).collect();
    let mut widths: Vec<usize> = head.iter().map(String::len).collect();
    for r in &body {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    for line in std::iter::once(&head).chain(&body) {
        let cells: Vec<String> = line.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}
