//! Text formats for frame streams and labeled records.
//!
//! Two encodings are accepted, one record per line:
//!
//! * NDJSON: `{"ts":0,"channels":{"RING3.Z":1.167,...},"label":"Joining"}`
//! * CSV: a header `ts,<channel names...>[,label]` followed by rows.
//!
//! [`StreamReader`] sniffs the encoding from the first non-blank line.

use std::io::{BufRead, Write};

use serde_json::{Map, Value};

use crate::error::ParseError;
use crate::types::{ChannelSchema, LabeledSample, SensorFrame, TaskLabel};

fn malformed(reason: impl Into<String>) -> ParseError {
    ParseError::MalformedLine { line: 0, reason: reason.into() }
}

fn parse_json_object(line: &str) -> Result<Map<String, Value>, ParseError> {
    match serde_json::from_str::<Value>(line) {
        Ok(Value::Object(obj)) => Ok(obj),
        Ok(_) => Err(malformed("expected a JSON object")),
        Err(e) => Err(malformed(e.to_string())),
    }
}

fn frame_from_object(obj: &Map<String, Value>, schema: &ChannelSchema) -> Result<SensorFrame, ParseError> {
    let ts = obj
        .get("ts")
        .ok_or_else(|| malformed("missing ts"))?
        .as_u64()
        .ok_or_else(|| malformed("ts must be a non-negative integer"))?;
    let channels = obj
        .get("channels")
        .and_then(Value::as_object)
        .ok_or_else(|| malformed("missing channels object"))?;
    let mut values = Vec::with_capacity(schema.len());
    for ch in schema.channels() {
        let v = channels
            .get(ch.as_str())
            .ok_or_else(|| ParseError::MissingChannel { line: 0, channel: ch.to_string() })?;
        let x = v
            .as_f64()
            .ok_or_else(|| malformed(format!("channel {ch} is not a number")))?;
        if !x.is_finite() {
            return Err(ParseError::NonFiniteValue { line: 0, channel: ch.to_string() });
        }
        values.push(x);
    }
    Ok(SensorFrame::new(ts, values, schema).expect("one value per schema channel"))
}

/// Parses one NDJSON frame record, reordering channels into schema order.
/// Channels not in the schema are ignored.
pub fn parse_frame(line: &str, schema: &ChannelSchema) -> Result<SensorFrame, ParseError> {
    let obj = parse_json_object(line)?;
    frame_from_object(&obj, schema)
}

/// Parses one NDJSON labeled record into a historical sample.
pub fn parse_labeled_record(line: &str, schema: &ChannelSchema) -> Result<LabeledSample, ParseError> {
    let obj = parse_json_object(line)?;
    let frame = frame_from_object(&obj, schema)?;
    let text = obj
        .get("label")
        .ok_or(ParseError::MissingLabel { line: 0 })?
        .as_str()
        .ok_or_else(|| malformed("label must be a string"))?;
    let label = parse_label(text)?;
    Ok(LabeledSample::historical(frame, label))
}

fn parse_label(text: &str) -> Result<TaskLabel, ParseError> {
    text.parse::<TaskLabel>()
        .map_err(|e| ParseError::UnknownLabel { line: 0, label: e.0 })
}

fn push_number(out: &mut String, x: f64) {
    // serde_json prints the shortest representation that round-trips.
    out.push_str(&Value::from(x).to_string());
}

/// Serializes a frame as an NDJSON line (no trailing newline), channels in
/// schema order.
pub fn serialize_frame(frame: &SensorFrame, schema: &ChannelSchema) -> String {
    serialize_record(frame, None, schema)
}

pub fn serialize_labeled(sample: &LabeledSample, schema: &ChannelSchema) -> String {
    serialize_record(&sample.frame, Some(sample.label), schema)
}

fn serialize_record(frame: &SensorFrame, label: Option<TaskLabel>, schema: &ChannelSchema) -> String {
    let mut out = String::with_capacity(32 + 24 * schema.len());
    out.push_str("{\"ts\":");
    out.push_str(&frame.ts.to_string());
    out.push_str(",\"channels\":{");
    for (i, ch) in schema.channels().iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&Value::from(ch.as_str()).to_string());
        out.push(':');
        push_number(&mut out, frame.value(i));
    }
    out.push('}');
    if let Some(l) = label {
        out.push_str(",\"label\":\"");
        out.push_str(l.ident());
        out.push('"');
    }
    out.push('}');
    out
}

/// Column layout of a CSV stream, resolved against a schema.
#[derive(Debug, Clone)]
pub struct CsvHeader {
    ts_col: usize,
    channel_cols: Vec<usize>,
    label_col: Option<usize>,
    width: usize,
}

impl CsvHeader {
    pub fn parse(line: &str, schema: &ChannelSchema) -> Result<Self, ParseError> {
        let names: Vec<&str> = line.split(',').map(str::trim).collect();
        let find = |n: &str| names.iter().position(|c| *c == n);
        let ts_col = find("ts").ok_or_else(|| malformed("CSV header lacks a ts column"))?;
        let channel_cols = schema
            .channels()
            .iter()
            .map(|ch| {
                find(ch.as_str())
                    .ok_or_else(|| ParseError::MissingChannel { line: 0, channel: ch.to_string() })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(CsvHeader { ts_col, channel_cols, label_col: find("label"), width: names.len() })
    }

    pub fn has_label(&self) -> bool {
        self.label_col.is_some()
    }

    fn fields<'a>(&self, line: &'a str) -> Result<Vec<&'a str>, ParseError> {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != self.width {
            return Err(malformed(format!("expected {} fields, got {}", self.width, fields.len())));
        }
        Ok(fields)
    }

    pub fn parse_frame(&self, line: &str, schema: &ChannelSchema) -> Result<SensorFrame, ParseError> {
        let fields = self.fields(line)?;
        self.frame_from_fields(&fields, schema)
    }

    pub fn parse_labeled(&self, line: &str, schema: &ChannelSchema) -> Result<LabeledSample, ParseError> {
        let fields = self.fields(line)?;
        let frame = self.frame_from_fields(&fields, schema)?;
        let col = self.label_col.ok_or(ParseError::MissingLabel { line: 0 })?;
        Ok(LabeledSample::historical(frame, parse_label(fields[col])?))
    }

    fn frame_from_fields(&self, fields: &[&str], schema: &ChannelSchema) -> Result<SensorFrame, ParseError> {
        let ts = fields[self.ts_col]
            .parse::<u64>()
            .map_err(|_| malformed(format!("bad ts {:?}", fields[self.ts_col])))?;
        let mut values = Vec::with_capacity(schema.len());
        for (ch, &col) in schema.channels().iter().zip(&self.channel_cols) {
            let x = fields[col]
                .parse::<f64>()
                .map_err(|_| malformed(format!("channel {ch}: bad number {:?}", fields[col])))?;
            if !x.is_finite() {
                return Err(ParseError::NonFiniteValue { line: 0, channel: ch.to_string() });
            }
            values.push(x);
        }
        Ok(SensorFrame::new(ts, values, schema).expect("one value per schema channel"))
    }
}

#[derive(Debug, Clone)]
enum Format {
    Ndjson,
    Csv(CsvHeader),
}

/// One parsed line of a stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    /// 1-based line number in the source.
    pub line: usize,
    pub frame: SensorFrame,
    pub label: Option<TaskLabel>,
}

/// Line-oriented reader for NDJSON or CSV streams. Blank lines are skipped.
pub struct StreamReader<R> {
    input: R,
    schema: ChannelSchema,
    format: Option<Format>,
    line_no: usize,
    want_label: bool,
    buf: String,
}

impl<R: BufRead> StreamReader<R> {
    /// Reader for unlabeled frames; label fields, if present, are ignored.
    pub fn frames(input: R, schema: ChannelSchema) -> Self {
        StreamReader { input, schema, format: None, line_no: 0, want_label: false, buf: String::new() }
    }

    /// Reader for labeled records; a missing or unknown label is an error.
    pub fn labeled(input: R, schema: ChannelSchema) -> Self {
        StreamReader { want_label: true, ..Self::frames(input, schema) }
    }

    pub fn schema(&self) -> &ChannelSchema {
        &self.schema
    }

    fn next_line(&mut self) -> Option<Result<(), ParseError>> {
        loop {
            self.buf.clear();
            match self.input.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {
                    self.line_no += 1;
                    if !self.buf.trim().is_empty() {
                        return Some(Ok(()));
                    }
                }
                Err(e) => {
                    self.line_no += 1;
                    return Some(Err(malformed(format!("read error: {e}")).at_line(self.line_no)));
                }
            }
        }
    }

    fn parse_current(&self, format: &Format) -> Result<Record, ParseError> {
        let line = self.buf.trim();
        let (frame, label) = match format {
            Format::Ndjson => {
                if self.want_label {
                    let s = parse_labeled_record(line, &self.schema)?;
                    (s.frame, Some(s.label))
                } else {
                    (parse_frame(line, &self.schema)?, None)
                }
            }
            Format::Csv(h) => {
                if self.want_label {
                    let s = h.parse_labeled(line, &self.schema)?;
                    (s.frame, Some(s.label))
                } else {
                    (h.parse_frame(line, &self.schema)?, None)
                }
            }
        };
        Ok(Record { line: self.line_no, frame, label })
    }
}

impl<R: BufRead> Iterator for StreamReader<R> {
    type Item = Result<Record, ParseError>;

    fn next(&mut self) -> Option<Self::Item> {
        if let Err(e) = self.next_line()? {
            return Some(Err(e));
        }
        if self.format.is_none() {
            if self.buf.trim_start().starts_with('{') {
                self.format = Some(Format::Ndjson);
            } else {
                let header = match CsvHeader::parse(self.buf.trim(), &self.schema) {
                    Ok(h) => h,
                    Err(e) => return Some(Err(e.at_line(self.line_no))),
                };
                if self.want_label && !header.has_label() {
                    return Some(Err(ParseError::MissingLabel { line: self.line_no }));
                }
                self.format = Some(Format::Csv(header));
                if let Err(e) = self.next_line()? {
                    return Some(Err(e));
                }
            }
        }
        let format = self.format.clone().expect("format resolved");
        Some(self.parse_current(&format).map_err(|e| e.at_line(self.line_no)))
    }
}

/// Reads every labeled record from `input`.
pub fn read_labeled<R: BufRead>(input: R, schema: &ChannelSchema) -> Result<Vec<LabeledSample>, ParseError> {
    StreamReader::labeled(input, schema.clone())
        .map(|r| {
            r.map(|rec| LabeledSample::historical(rec.frame, rec.label.expect("labeled reader")))
        })
        .collect()
}

/// Writes labeled samples as NDJSON, one per line.
pub fn write_labeled<W: Write>(
    mut out: W,
    samples: &[LabeledSample],
    schema: &ChannelSchema,
) -> std::io::Result<()> {
    for s in samples {
        writeln!(out, "{}", serialize_labeled(s, schema))?;
    }
    Ok(())
}
