//! Line-oriented response-log formats.
//!
//! Delimited: `student_id,exercise_id,k1;k2;...,score,content` with exactly
//! five comma-separated fields (content may be empty, must not contain a
//! comma). JSON lines: one object per line with keys `student_id`,
//! `exercise_id`, `concepts`, `score`, `content`.

use serde::{Deserialize, Serialize};

use crate::dataset::ResponseLog;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogFormat {
    Delimited,
    JsonLines,
}

impl LogFormat {
    /// JSON lines when the first non-blank line opens an object.
    pub fn detect(source: &str) -> LogFormat {
        match source.lines().map(str::trim).find(|l| !l.is_empty()) {
            Some(l) if l.starts_with('{') => LogFormat::JsonLines,
            _ => LogFormat::Delimited,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LogRecord {
    student_id: String,
    exercise_id: String,
    concepts: Vec<String>,
    score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    content: Option<String>,
}

fn validation(line: usize, message: impl Into<String>) -> Error {
    Error::Validation {
        line,
        message: message.into(),
    }
}

fn make_log(
    line: usize,
    student: &str,
    exercise: &str,
    concepts: impl IntoIterator<Item = String>,
    score: f64,
    content: Option<String>,
) -> Result<ResponseLog> {
    let student = student.trim();
    let exercise = exercise.trim();
    if student.is_empty() || exercise.is_empty() {
        return Err(validation(line, "empty student or exercise id"));
    }
    let mut set: Vec<String> = Vec::new();
    for c in concepts {
        let c = c.trim().to_string();
        if !c.is_empty() && !set.contains(&c) {
            set.push(c);
        }
    }
    if set.is_empty() {
        return Err(validation(line, "concept list is empty"));
    }
    let correct = if score == 1.0 {
        true
    } else if score == 0.0 {
        false
    } else {
        return Err(validation(line, format!("score {score} outside {{0,1}}")));
    };
    Ok(ResponseLog {
        student_id: student.to_string(),
        exercise_id: exercise.to_string(),
        concepts: set,
        correct,
        content: content.filter(|c| !c.trim().is_empty()),
    })
}

fn parse_delimited_line(line_no: usize, line: &str) -> Result<ResponseLog> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 5 {
        return Err(Error::Parse {
            line: line_no,
            message: format!("expected 5 comma-separated fields, found {}", fields.len()),
        });
    }
    let score_txt = fields[3].trim();
    let score: f64 = score_txt
        .parse()
        .map_err(|_| validation(line_no, format!("score {score_txt:?} outside {{0,1}}")))?;
    let content = Some(fields[4].trim().to_string());
    make_log(
        line_no,
        fields[0],
        fields[1],
        fields[2].split(';').map(str::to_string),
        score,
        content,
    )
}

fn parse_json_line(line_no: usize, line: &str) -> Result<ResponseLog> {
    let rec: LogRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    make_log(
        line_no,
        &rec.student_id,
        &rec.exercise_id,
        rec.concepts,
        rec.score,
        rec.content,
    )
}

/// Parses records in input order, skipping blank lines. Line numbers in
/// errors are 1-based.
pub fn parse_response_logs(source: &str) -> Result<Vec<ResponseLog>> {
    parse_response_logs_as(source, LogFormat::detect(source))
}

pub fn parse_response_logs_as(source: &str, format: LogFormat) -> Result<Vec<ResponseLog>> {
    let mut out = Vec::new();
    for (i, raw) in source.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let rec = match format {
            LogFormat::Delimited => parse_delimited_line(i + 1, line)?,
            LogFormat::JsonLines => parse_json_line(i + 1, line)?,
        };
        out.push(rec);
    }
    Ok(out)
}

/// Renders logs in the requested format, one record per line.
///
/// The delimited form rejects content or ids that would not parse back.
pub fn write_response_logs(logs: &[ResponseLog], format: LogFormat) -> Result<String> {
    let mut out = String::new();
    for (i, log) in logs.iter().enumerate() {
        match format {
            LogFormat::Delimited => {
                let content = log.content.as_deref().unwrap_or("");
                let fields = [log.student_id.as_str(), log.exercise_id.as_str(), content];
                if fields.iter().any(|f| f.contains(',') || f.contains('\n'))
                    || log.concepts.iter().any(|c| c.contains([',', ';', '\n']))
                {
                    return Err(validation(
                        i + 1,
                        "field contains a delimiter; use the JSON-lines format",
                    ));
                }
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    log.student_id,
                    log.exercise_id,
                    log.concepts.join(";"),
                    u8::from(log.correct),
                    content
                ));
            }
            LogFormat::JsonLines => {
                let rec = LogRecord {
                    student_id: log.student_id.clone(),
                    exercise_id: log.exercise_id.clone(),
                    concepts: log.concepts.clone(),
                    score: if log.correct { 1.0 } else { 0.0 },
                    content: log.content.clone(),
                };
                out.push_str(&serde_json::to_string(&rec)?);
                out.push('\n');
            }
        }
    }
    Ok(out)
}
