//! Reads report rows back and summarizes them.

use std::fmt::Write as _;
use std::io::Read;

use serde::Serialize;

use crate::anomaly::Verdict;
use crate::error::PipelineError;
use crate::timeline::{ReportRow, REPORT_COLUMNS, VERSION_COLUMN};
use crate::types::TaskLabel;

fn report_err(msg: impl Into<String>) -> PipelineError {
    PipelineError::Report(msg.into())
}

fn blank(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c.eq_ignore_ascii_case("na")
}

fn parse_range(cell: &str) -> Option<Result<(f64, f64), ()>> {
    if blank(cell) {
        return None;
    }
    let inner = cell.trim().strip_prefix('[').and_then(|c| c.strip_suffix(']'));
    let parsed = inner.and_then(|c| {
        let (a, b) = c.split_once(',')?;
        Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
    });
    Some(parsed.ok_or(()))
}

/// Parses a report CSV with the standard columns and an optional model
/// version column. Only ID, time stamp and task are required per row; the
/// verdict cell may be left blank, which reads as NA.
pub fn read_rows<R: Read>(input: R) -> Result<Vec<ReportRow>, PipelineError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers().map_err(|e| report_err(e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let mut idx = Vec::new();
    for name in REPORT_COLUMNS {
        idx.push(col(name).ok_or_else(|| report_err(format!("missing column {name:?}")))?);
    }
    let version_col = col(VERSION_COLUMN);

    let mut rows = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let line = n + 2;
        let rec = rec.map_err(|e| report_err(format!("line {line}: {e}")))?;
        let cell = |i: usize| rec.get(i).unwrap_or("");
        let bad = |what: &str, v: &str| report_err(format!("line {line}: invalid {what} {v:?}"));
        let id = cell(idx[0]).parse().map_err(|_| bad("id", cell(idx[0])))?;
        let ts = cell(idx[1]).parse().map_err(|_| bad("time stamp", cell(idx[1])))?;
        let task: TaskLabel = cell(idx[2]).parse().map_err(|_| bad("task", cell(idx[2])))?;
        let processing_time = if blank(cell(idx[3])) {
            None
        } else {
            Some(cell(idx[3]).parse::<f64>().map_err(|_| bad("processing time", cell(idx[3])))?)
        };
        let range = parse_range(cell(idx[4])).transpose().map_err(|_| bad("range", cell(idx[4])))?;
        let abnormality = if cell(idx[5]).is_empty() {
            Verdict::NA
        } else {
            Verdict::parse(cell(idx[5])).ok_or_else(|| bad("abnormality", cell(idx[5])))?
        };
        let model_version = match version_col.map(cell) {
            Some(v) if !blank(v) => Some(v.parse().map_err(|_| bad("model version", v))?),
            _ => None,
        };
        rows.push(ReportRow { id, ts, task, processing_time, range, abnormality, model_version });
    }
    Ok(rows)
}

/// One ground-truth task interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthSpan {
    pub label: TaskLabel,
    pub start_ts: u64,
    pub end_ts: u64,
}

/// Reads a truth CSV with columns `label,start_ts,end_ts[,duration_s]`.
pub fn read_truth<R: Read>(input: R) -> Result<Vec<TruthSpan>, PipelineError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers().map_err(|e| report_err(e.to_string()))?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h.eq_ignore_ascii_case(name)).ok_or_else(|| report_err(format!("truth file lacks {name:?}")))
    };
    let (li, si, ei) = (col("label")?, col("start_ts")?, col("end_ts")?);
    let mut out = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let line = n + 2;
        let rec = rec.map_err(|e| report_err(format!("truth line {line}: {e}")))?;
        let get = |i: usize| rec.get(i).unwrap_or("");
        let label = get(li).parse().map_err(|_| report_err(format!("truth line {line}: bad label")))?;
        let start_ts = get(si).parse().map_err(|_| report_err(format!("truth line {line}: bad start_ts")))?;
        let end_ts: u64 = get(ei).parse().map_err(|_| report_err(format!("truth line {line}: bad end_ts")))?;
        if end_ts < start_ts {
            return Err(report_err(format!("truth line {line}: end before start")));
        }
        out.push(TruthSpan { label, start_ts, end_ts });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DurationStats {
    pub task: TaskLabel,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub rows: usize,
    pub durations: Vec<DurationStats>,
    pub abnormal: usize,
    pub normal: usize,
    pub not_assessed: usize,
    /// Time-weighted agreement with the truth spans, when given.
    pub accuracy: Option<f64>,
    pub versions: Option<(u64, u64)>,
}

fn stats(task: TaskLabel, xs: &[f64]) -> DurationStats {
    if xs.is_empty() {
        return DurationStats { task, count: 0, mean: 0.0, std: 0.0, min: 0.0, max: 0.0 };
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    DurationStats {
        task,
        count: xs.len(),
        mean,
        std,
        min: xs.iter().copied().fold(f64::INFINITY, f64::min),
        max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Reported task at each instant is the task of the latest row at or before
/// it. Agreement is measured over the union of truth spans.
pub fn timeline_accuracy(rows: &[ReportRow], truth: &[TruthSpan]) -> Option<f64> {
    let total: u64 = truth.iter().map(|t| t.end_ts - t.start_ts).sum();
    if total == 0 {
        return None;
    }
    let mut sorted: Vec<&ReportRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.ts);
    let mut agree = 0u64;
    for span in truth {
        for (i, r) in sorted.iter().enumerate() {
            let from = r.ts.max(span.start_ts);
            let to = sorted.get(i + 1).map_or(u64::MAX, |n| n.ts).min(span.end_ts);
            if to > from && r.task == span.label {
                agree += to - from;
            }
        }
    }
    Some(agree as f64 / total as f64)
}

pub fn summarize(rows: &[ReportRow], truth: Option<&[TruthSpan]>) -> Summary {
    let mut by_task: [Vec<f64>; TaskLabel::COUNT] = Default::default();
    for r in rows {
        if let Some(d) = r.processing_time {
            by_task[r.task.index()].push(d);
        }
    }
    let count = |v: Verdict| rows.iter().filter(|r| r.abnormality == v).count();
    let versions = rows.iter().filter_map(|r| r.model_version).fold(None, |acc: Option<(u64, u64)>, v| {
        Some(acc.map_or((v, v), |(lo, hi)| (lo.min(v), hi.max(v))))
    });
    Summary {
        rows: rows.len(),
        durations: TaskLabel::ALL.iter().map(|&l| stats(l, &by_task[l.index()])).collect(),
        abnormal: count(Verdict::Abnormal),
        normal: count(Verdict::Normal),
        not_assessed: count(Verdict::NA),
        accuracy: truth.and_then(|t| timeline_accuracy(rows, t)),
        versions,
    }
}

pub fn render_summary(s: &Summary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "rows: {}", s.rows);
    let _ = writeln!(out, "{:<20} {:>6} {:>8} {:>8} {:>8} {:>8}", "task", "count", "mean_s", "std_s", "min_s", "max_s");
    for d in &s.durations {
        let _ = writeln!(
            out,
            "{:<20} {:>6} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
            d.task.display_name(),
            d.count,
            d.mean,
            d.std,
            d.min,
            d.max
        );
    }
    let _ = writeln!(out, "abnormal: {}  normal: {}  not assessed: {}", s.abnormal, s.normal, s.not_assessed);
    if let Some((lo, hi)) = s.versions {
        let _ = writeln!(out, "model versions: {lo}..={hi}");
    }
    if let Some(a) = s.accuracy {
        let _ = writeln!(out, "accuracy: {a:.4}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeline::write_csv;

    fn row(id: u64, ts: u64, task: TaskLabel, d: Option<f64>, v: Verdict) -> ReportRow {
        ReportRow { id, ts, task, processing_time: d, range: d.map(|x| (x - 0.1, x + 0.1)), abnormality: v, model_version: Some(1) }
    }

    #[test]
    fn round_trip_through_csv() {
        let rows = vec![
            row(1, 0, TaskLabel::ScionCutting, Some(4.2), Verdict::Normal),
            row(211, 4200, TaskLabel::RootstockCutting, None, Verdict::NA),
        ];
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows).unwrap();
        let back = read_rows(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].task, TaskLabel::ScionCutting);
        assert_eq!(back[0].range, Some((4.1, 4.3)));
        assert_eq!(back[1].abnormality, Verdict::NA);
        assert_eq!(back[1].model_version, Some(1));
    }

    #[test]
    fn empty_report_is_all_zero() {
        let text = REPORT_COLUMNS.join(",") + "\n";
        let rows = read_rows(text.as_bytes()).unwrap();
        let s = summarize(&rows, None);
        assert_eq!((s.rows, s.abnormal, s.normal, s.not_assessed), (0, 0, 0, 0));
        assert!(s.durations.iter().all(|d| d.count == 0 && d.mean == 0.0));
        assert!(render_summary(&s).contains("abnormal: 0"));
    }

    #[test]
    fn malformed_rows_are_rejected() {
        let head = REPORT_COLUMNS.join(",");
        assert!(read_rows(format!("{head}\nx,0,Joining,,,\n").as_bytes()).is_err());
        assert!(read_rows(format!("{head}\n1,0,Watering,,,\n").as_bytes()).is_err());
        assert!(read_rows(format!("{head}\n1,0,Joining,1.0,\"[1, x]\",No\n").as_bytes()).is_err());
        assert!(read_rows("ID,Time Stamp\n1,0\n".as_bytes()).is_err());
    }

    #[test]
    fn accuracy_against_truth() {
        let rows = vec![
            row(1, 0, TaskLabel::ScionCutting, Some(1.0), Verdict::Normal),
            row(51, 1000, TaskLabel::Joining, None, Verdict::NA),
        ];
        let exact = [
            TruthSpan { label: TaskLabel::ScionCutting, start_ts: 0, end_ts: 1000 },
            TruthSpan { label: TaskLabel::Joining, start_ts: 1000, end_ts: 3000 },
        ];
        assert_eq!(summarize(&rows, Some(&exact)).accuracy, Some(1.0));
        let shifted = [
            TruthSpan { label: TaskLabel::ScionCutting, start_ts: 0, end_ts: 1500 },
            TruthSpan { label: TaskLabel::Joining, start_ts: 1500, end_ts: 2000 },
        ];
        assert_eq!(timeline_accuracy(&rows, &shifted), Some(0.75));
    }
}
