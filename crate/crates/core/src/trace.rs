//! Line-delimited JSON traces. The first line is the header; every other
//! line is one event with `tick`, `seq` and `kind` first and a flat payload
//! after, in a fixed field order so traces can be byte-compared.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub kind: String,
    pub version: u32,
    pub scenario: String,
    pub hash: String,
    pub seed: u64,
    pub ticks: u64,
}

impl TraceHeader {
    pub fn new(scenario: &str, hash: &str, seed: u64, ticks: u64) -> Self {
        Self {
            kind: "header".to_owned(),
            version: TRACE_VERSION,
            scenario: scenario.to_owned(),
            hash: hash.to_owned(),
            seed,
            ticks,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub tick: u64,
    pub seq: u64,
    pub kind: &'static str,
    pub fields: Vec<(&'static str, Value)>,
}

impl TraceEvent {
    pub fn get(&self, key: &str) -> Option<&Value> {
        self.fields.iter().find(|(k, _)| *k == key).map(|(_, v)| v)
    }

    pub fn str(&self, key: &str) -> Option<&str> {
        self.get(key).and_then(Value::as_str)
    }

    pub fn to_line(&self) -> String {
        let mut line = format!("{{\"tick\":{},\"seq\":{},\"kind\":{}", self.tick, self.seq, Value::from(self.kind));
        for (k, v) in &self.fields {
            let _ = write!(line, ",{}:{}", Value::from(*k), v);
        }
        line.push('}');
        line
    }
}

/// Shorthand for building payloads.
#[macro_export]
macro_rules! fields {
    ($($k:literal => $v:expr),* $(,)?) => {
        vec![$(($k, ::serde_json::Value::from($v))),*]
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new(header: TraceHeader) -> Self {
        Self {
            header,
            events: Vec::new(),
        }
    }

    pub fn push(&mut self, tick: u64, kind: &'static str, fields: Vec<(&'static str, Value)>) {
        let seq = self.events.len() as u64;
        self.events.push(TraceEvent { tick, seq, kind, fields });
    }

    pub fn lines(&self) -> impl Iterator<Item = String> + '_ {
        std::iter::once(serde_json::to_string(&self.header).expect("header serializes"))
            .chain(self.events.iter().map(TraceEvent::to_line))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for line in self.lines() {
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    pub fn of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a TraceEvent> + 'a {
        self.events.iter().filter(move |e| e.kind == kind)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("trace is empty")]
    Empty,
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
}

/// A stored event as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub line: usize,
    pub tick: u64,
    pub seq: u64,
    pub kind: String,
    pub fields: Map<String, Value>,
}

impl Record {
    pub fn str(&self, key: &str) -> Option<&str> {
        self.fields.get(key).and_then(Value::as_str)
    }

    pub fn u64(&self, key: &str) -> Option<u64> {
        self.fields.get(key).and_then(Value::as_u64)
    }

    pub fn i64(&self, key: &str) -> Option<i64> {
        self.fields.get(key).and_then(Value::as_i64)
    }

    pub fn strings(&self, key: &str) -> Vec<String> {
        self.fields
            .get(key)
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(|v| v.as_str().map(str::to_owned)).collect())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTrace {
    pub header: TraceHeader,
    /// Raw event lines, without the header.
    pub lines: Vec<String>,
    pub records: Vec<Record>,
}

pub fn parse_trace(text: &str) -> Result<StoredTrace, TraceError> {
    let mut lines = text.lines();
    let first = lines.next().ok_or(TraceError::Empty)?;
    let header: TraceHeader = serde_json::from_str(first).map_err(|e| TraceError::Malformed {
        line: 1,
        message: e.to_string(),
    })?;
    let mut raw = Vec::new();
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let malformed = |message: String| TraceError::Malformed { line: line_no, message };
        let mut fields: Map<String, Value> = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        let mut take_u64 = |k: &str| {
            fields
                .remove(k)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| malformed(format!("missing `{k}`")))
        };
        let tick = take_u64("tick")?;
        let seq = take_u64("seq")?;
        let kind = match fields.remove("kind") {
            Some(Value::String(s)) => s,
            _ => return Err(malformed("missing `kind`".to_owned())),
        };
        raw.push(line.to_owned());
        records.push(Record {
            line: line_no,
            tick,
            seq,
            kind,
            fields,
        });
    }
    Ok(StoredTrace {
        header,
        lines: raw,
        records,
    })
}
