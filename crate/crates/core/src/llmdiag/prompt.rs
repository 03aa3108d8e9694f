use serde::Serialize;
use serde_json::json;

use super::{DiagnosisRecord, PromptPair, Stage};
use crate::alignment::EntityKind;
use crate::dataset::ResponseLog;
use crate::error::{Error, Result};

const TEACHER: &str = "You are an experienced teacher who analyses students' learning records. \
Read the response logs carefully and summarise what they show about the knowledge concepts involved.";

const STUDENT_COLLAB_TASK: &str = "The input is a JSON object whose STUDY HISTORY lists the exercises one student \
attempted, each with its content, the knowledge concepts it tests, and the answer (1 correct, 0 incorrect). \
Describe the student's strengths, weaknesses and learning habits.";

const EXERCISE_COLLAB_TASK: &str = "The input is a JSON object describing one exercise: its content, the knowledge \
concepts it tests, and the answers of every student who attempted it (1 correct, 0 incorrect). \
Describe how hard the exercise is, which concepts cause trouble, and what separates students who solve it.";

const DIAGNOSIS_TASK: &str = "The input holds a profile written from the learner's records together with the \
response logs themselves. Produce a cognitive diagnosis: for a student, the mastery of each knowledge concept; \
for an exercise, the difficulty and the concepts it really examines. \
Answer with a JSON object of the form {\"diagnosis\": \"...\", \"reason\": \"...\"} and give the reasons for your diagnosis.";

#[derive(Serialize)]
struct HistoryEntry<'a> {
    content: &'a str,
    concept: String,
    answer: u8,
}

#[derive(Serialize)]
struct ResponseEntry<'a> {
    student: &'a str,
    answer: u8,
}

fn content_of(log: &ResponseLog) -> &str {
    log.content.as_deref().unwrap_or(&log.exercise_id)
}

fn history<'a>(logs: &[&'a ResponseLog]) -> Vec<HistoryEntry<'a>> {
    logs.iter()
        .map(|l| HistoryEntry {
            content: content_of(l),
            concept: l.concepts.join(", "),
            answer: u8::from(l.correct),
        })
        .collect()
}

fn responses<'a>(logs: &[&'a ResponseLog]) -> Vec<ResponseEntry<'a>> {
    logs.iter()
        .map(|l| ResponseEntry {
            student: &l.student_id,
            answer: u8::from(l.correct),
        })
        .collect()
}

/// Renders `build(first..)` while the result exceeds `limit`, dropping the
/// oldest entries; at least one entry is always kept.
fn render_within<T: Serialize>(
    entries: &[T],
    limit: Option<usize>,
    build: impl Fn(&[T]) -> serde_json::Value,
) -> Result<String> {
    let mut start = 0;
    loop {
        let text = serde_json::to_string(&build(&entries[start..]))?;
        match limit {
            Some(l) if text.chars().count() > l && start + 1 < entries.len() => start += 1,
            _ => return Ok(text),
        }
    }
}

fn system(task: &str) -> String {
    format!("{TEACHER}\n{task}")
}

pub fn build_student_collab_prompt(logs: &[&ResponseLog], char_limit: Option<usize>) -> Result<PromptPair> {
    if logs.is_empty() {
        return Err(Error::contract("student prompt needs at least one response log"));
    }
    let entries = history(logs);
    let input = render_within(&entries, char_limit, |e| json!({ "STUDY HISTORY": e }))?;
    Ok(PromptPair {
        system_prompt: system(STUDENT_COLLAB_TASK),
        input_prompt: input,
    })
}

pub fn build_exercise_collab_prompt(
    content: &str,
    concepts: &[String],
    logs: &[&ResponseLog],
    char_limit: Option<usize>,
) -> Result<PromptPair> {
    if logs.is_empty() {
        return Err(Error::contract("exercise prompt needs at least one participant"));
    }
    let entries = responses(logs);
    let input = render_within(
        &entries,
        char_limit,
        |e| json!({ "content": content, "concepts": concepts, "responses": e }),
    )?;
    Ok(PromptPair {
        system_prompt: system(EXERCISE_COLLAB_TASK),
        input_prompt: input,
    })
}

/// Second-stage prompt: the collaborative summary as a profile next to
/// the entity's logs.
pub fn build_diagnosis_prompt(
    kind: EntityKind,
    id: &str,
    collab: &DiagnosisRecord,
    logs: &[&ResponseLog],
    char_limit: Option<usize>,
) -> Result<PromptPair> {
    if collab.stage != Stage::Collab {
        return Err(Error::contract(format!(
            "diagnosis prompt needs a collab record, got {:?}",
            collab.stage
        )));
    }
    if collab.kind != kind || collab.id != id {
        return Err(Error::contract(format!(
            "collab record is for {} {:?}, not {kind} {id:?}",
            collab.kind, collab.id
        )));
    }
    if logs.is_empty() {
        return Err(Error::contract("diagnosis prompt needs at least one response log"));
    }
    let profile = collab.text.as_str();
    let input = match kind {
        EntityKind::Student => {
            let entries = history(logs);
            render_within(
                &entries,
                char_limit,
                |e| json!({ "profile": profile, "STUDY HISTORY": e }),
            )?
        }
        EntityKind::Exercise => {
            let entries = responses(logs);
            let content = content_of(logs[0]);
            let concepts = &logs[0].concepts;
            render_within(
                &entries,
                char_limit,
                |e| json!({ "profile": profile, "content": content, "concepts": concepts, "responses": e }),
            )?
        }
    };
    Ok(PromptPair {
        system_prompt: system(DIAGNOSIS_TASK),
        input_prompt: input,
    })
}
