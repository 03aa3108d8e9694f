//! Two-stage textual diagnosis of students and exercises: a collaborative
//! summary built from every counterpart interaction, then a diagnosis
//! conditioned on that summary. Remote calls go to an OpenAI-compatible
//! endpoint; an offline stub produces deterministic text instead.

mod client;
mod embed;
mod prompt;
mod run;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use client::{
    chat_complete, DiagnosisCache, DiagnosisRequest, EndpointConfig, HttpTransport, Transport, TransportError,
};
pub use embed::{embed_text, stub_embedding, Embedder, STUB_EMBED_DIM};
pub use prompt::{build_diagnosis_prompt, build_exercise_collab_prompt, build_student_collab_prompt};
pub use run::{diagnose_dataset, embed_diagnoses};

use crate::alignment::EntityKind;
use crate::dataset::ResponseLog;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub system_prompt: String,
    /// A JSON document.
    pub input_prompt: String,
}

impl PromptPair {
    /// Hex SHA-256 over both prompts.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.system_prompt.as_bytes());
        h.update([0u8]);
        h.update(self.input_prompt.as_bytes());
        hex::encode(h.finalize())
    }
}

pub fn text_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Collab,
    Diagnosis,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordSource {
    Remote,
    Stub,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisRecord {
    pub kind: EntityKind,
    pub id: String,
    pub stage: Stage,
    pub text: String,
    pub reason: String,
    pub prompt_digest: String,
    pub source: RecordSource,
}

fn ratio(correct: usize, total: usize) -> String {
    format!("{correct}/{total}, {:.2}", correct as f64 / total as f64)
}

/// Deterministic stand-in for model output: per-concept accuracy for a
/// student, overall and per-concept solve rates for an exercise.
pub fn stub_diagnose(kind: EntityKind, id: &str, logs: &[&ResponseLog], stage: Stage) -> Result<DiagnosisRecord> {
    if logs.is_empty() {
        return Err(Error::contract(format!(
            "{kind} {id:?} has no response logs to summarise"
        )));
    }
    let mut per_concept: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for log in logs {
        for c in &log.concepts {
            let e = per_concept.entry(c).or_default();
            e.0 += usize::from(log.correct);
            e.1 += 1;
        }
    }
    let summary = match kind {
        EntityKind::Student => {
            let (mut mastered, mut weak) = (Vec::new(), Vec::new());
            for (c, (ok, n)) in &per_concept {
                let item = format!("{c} ({})", ratio(*ok, *n));
                if *ok * 2 > *n {
                    mastered.push(item);
                } else {
                    weak.push(item);
                }
            }
            format!("mastered: {}; weak: {}", list(&mastered), list(&weak))
        }
        EntityKind::Exercise => {
            let ok = logs.iter().filter(|l| l.correct).count();
            let concepts: Vec<&str> = per_concept.keys().copied().collect();
            let level = match ok as f64 / logs.len() as f64 {
                r if r >= 0.7 => "easy",
                r if r >= 0.4 => "medium",
                _ => "hard",
            };
            format!(
                "solved by {} students; {level}; concepts: {}",
                ratio(ok, logs.len()),
                concepts.join(", ")
            )
        }
    };
    let text = match stage {
        Stage::Collab => summary,
        Stage::Diagnosis => format!("diagnosis of {kind} {id}: {summary}"),
    };
    Ok(DiagnosisRecord {
        kind,
        id: id.to_string(),
        stage,
        text,
        reason: format!("accuracy over {} responses", logs.len()),
        prompt_digest: String::new(),
        source: RecordSource::Stub,
    })
}

fn list(items: &[String]) -> String {
    if items.is_empty() {
        "none".to_string()
    } else {
        items.join(", ")
    }
}

/// Records in cache-file form, one JSON object per line.
pub fn write_records_jsonl(records: &[DiagnosisRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_records_jsonl(text: &str) -> Result<Vec<DiagnosisRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
