//! Event annotations and the tab-separated strong-label format
//! `filename<TAB>onset<TAB>offset<TAB>event_label`.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// One event of a clip, times in seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EventAnnotation {
    pub class: usize,
    pub onset: f64,
    pub offset: f64,
}

impl EventAnnotation {
    pub fn new(class: usize, onset: f64, offset: f64) -> Result<Self> {
        if !(onset.is_finite() && offset.is_finite() && 0.0 <= onset && onset < offset) {
            return Err(Error::Invalid(format!("bad event interval ({onset}, {offset})")));
        }
        Ok(Self { class, onset, offset })
    }

    pub fn duration(&self) -> f64 {
        self.offset - self.onset
    }
}

/// A row of an annotation file.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledEvent {
    pub filename: String,
    pub onset: f64,
    pub offset: f64,
    pub label: String,
}

const HEADER: &str = "filename\tonset\toffset\tevent_label";

fn parse_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::format("annotations", format!("line {line}: {msg}"))
}

/// Parses annotation text. An optional header line is accepted; blank lines
/// are skipped.
pub fn parse_annotations(text: &str) -> Result<Vec<LabeledEvent>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || (i == 0 && line == HEADER) {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(parse_err(
                i + 1,
                format!("expected 4 tab-separated fields, got {}", fields.len()),
            ));
        }
        let time = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| parse_err(i + 1, format!("time {s:?}: {e}")))
        };
        let (onset, offset) = (time(fields[1])?, time(fields[2])?);
        if !(onset.is_finite() && offset.is_finite() && 0.0 <= onset && onset < offset) {
            return Err(parse_err(i + 1, format!("bad interval ({onset}, {offset})")));
        }
        if fields[0].is_empty() || fields[3].is_empty() {
            return Err(parse_err(i + 1, "empty filename or label"));
        }
        out.push(LabeledEvent {
            filename: fields[0].to_string(),
            onset,
            offset,
            label: fields[3].to_string(),
        });
    }
    Ok(out)
}

/// Formats events with a header line. Times use the shortest round-trip
/// representation, so parsing the output reproduces the input exactly.
pub fn format_annotations(events: &[LabeledEvent]) -> String {
    let mut s = String::from(HEADER);
    s.push('\n');
    for e in events {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", e.filename, e.onset, e.offset, e.label);
    }
    s
}
