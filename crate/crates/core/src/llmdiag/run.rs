use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::{
    build_diagnosis_prompt, build_exercise_collab_prompt, build_student_collab_prompt, chat_complete, text_digest,
    DiagnosisCache, DiagnosisRecord, DiagnosisRequest, Embedder, EndpointConfig, RecordSource, Stage, Transport,
};
use crate::alignment::{EmbeddingSource, EmbeddingTable, EmbeddingTables, EntityKind};
use crate::dataset::{DatasetSplit, EntityIndex, Indices, ResponseLog};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

struct Job<'a> {
    kind: EntityKind,
    id: &'a str,
    logs: Vec<&'a ResponseLog>,
    /// Exercise metadata, taken from any split.
    meta: Option<&'a ResponseLog>,
}

fn placeholder(job: &Job<'_>) -> DiagnosisRecord {
    let text = match (job.kind, job.meta) {
        (EntityKind::Exercise, Some(m)) => format!(
            "exercise {}: no training responses; concepts: {}; content: {}",
            job.id,
            m.concepts.join(", "),
            m.content.as_deref().unwrap_or("")
        ),
        (kind, _) => format!("{kind} {}: no training responses", job.id),
    };
    DiagnosisRecord {
        kind: job.kind,
        id: job.id.to_string(),
        stage: Stage::Diagnosis,
        prompt_digest: text_digest(&text),
        text,
        reason: String::new(),
        source: RecordSource::Stub,
    }
}

fn run_job(
    cfg: &EndpointConfig,
    transport: &dyn Transport,
    cache: &DiagnosisCache,
    job: &Job<'_>,
) -> Result<(Option<DiagnosisRecord>, DiagnosisRecord)> {
    if job.logs.is_empty() {
        return Ok((None, placeholder(job)));
    }
    let collab_prompt = match job.kind {
        EntityKind::Student => build_student_collab_prompt(&job.logs, cfg.char_limit)?,
        EntityKind::Exercise => {
            let first = job.logs[0];
            build_exercise_collab_prompt(
                first.content.as_deref().unwrap_or(&first.exercise_id),
                &first.concepts,
                &job.logs,
                cfg.char_limit,
            )?
        }
    };
    let request = |stage, prompt| DiagnosisRequest {
        kind: job.kind,
        id: job.id,
        stage,
        prompt,
        logs: &job.logs,
    };
    let collab = chat_complete(cfg, transport, cache, &request(Stage::Collab, collab_prompt))?;
    let prompt = build_diagnosis_prompt(job.kind, job.id, &collab, &job.logs, cfg.char_limit)?;
    let diagnosis = chat_complete(cfg, transport, cache, &request(Stage::Diagnosis, prompt))?;
    Ok((Some(collab), diagnosis))
}

/// Collaborative summary then diagnosis for every student and exercise,
/// built from training logs only. Entities without training logs get a
/// fixed placeholder text. Returns both stages, students first, in dense
/// index order.
pub fn diagnose_dataset(
    split: &DatasetSplit,
    cfg: &EndpointConfig,
    transport: &dyn Transport,
    cache: &DiagnosisCache,
) -> Result<Vec<DiagnosisRecord>> {
    let idx = &split.indices;
    let mut by_student: Vec<Vec<&ResponseLog>> = vec![Vec::new(); idx.students.len()];
    let mut by_exercise: Vec<Vec<&ResponseLog>> = vec![Vec::new(); idx.exercises.len()];
    for log in &split.train {
        by_student[idx.students.require(&log.student_id)?].push(log);
        by_exercise[idx.exercises.require(&log.exercise_id)?].push(log);
    }
    let mut meta: Vec<Option<&ResponseLog>> = vec![None; idx.exercises.len()];
    for log in split.all_logs() {
        let j = idx.exercises.require(&log.exercise_id)?;
        meta[j].get_or_insert(log);
    }
    let mut jobs = Vec::with_capacity(idx.students.len() + idx.exercises.len());
    for (i, logs) in by_student.into_iter().enumerate() {
        jobs.push(Job {
            kind: EntityKind::Student,
            id: idx.students.id(i),
            logs,
            meta: None,
        });
    }
    for (j, logs) in by_exercise.into_iter().enumerate() {
        jobs.push(Job {
            kind: EntityKind::Exercise,
            id: idx.exercises.id(j),
            logs,
            meta: meta[j],
        });
    }

    let workers = if cfg.is_offline() { 1 } else { cfg.concurrency.max(1) };
    let results: Vec<Result<(Option<DiagnosisRecord>, DiagnosisRecord)>> = if workers == 1 {
        jobs.iter().map(|j| run_job(cfg, transport, cache, j)).collect()
    } else {
        let next = AtomicUsize::new(0);
        let mut slots: Vec<Option<Result<_>>> = (0..jobs.len()).map(|_| None).collect();
        let done = std::sync::Mutex::new(&mut slots);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= jobs.len() {
                        break;
                    }
                    let r = run_job(cfg, transport, cache, &jobs[i]);
                    done.lock().expect("result lock")[i] = Some(r);
                });
            }
        });
        slots.into_iter().map(|r| r.expect("every job ran")).collect()
    };

    let mut out = Vec::with_capacity(2 * jobs.len());
    for r in results {
        let (collab, diagnosis) = r?;
        out.extend(collab);
        out.push(diagnosis);
    }
    Ok(out)
}

fn table_for(
    kind: EntityKind,
    index: &EntityIndex,
    texts: &BTreeMap<(EntityKind, &str), &str>,
    embedder: &Embedder,
    transport: &dyn Transport,
) -> Result<EmbeddingTable> {
    let ordered: Vec<&str> = index
        .ids()
        .iter()
        .map(|id| {
            texts
                .get(&(kind, id.as_str()))
                .copied()
                .ok_or_else(|| Error::config(format!("no diagnosis for {kind} {id:?}")))
        })
        .collect::<Result<_>>()?;
    let vectors = embedder.embed_many(transport, &ordered)?;
    let source = if embedder.is_offline() {
        EmbeddingSource::OfflineStub
    } else {
        EmbeddingSource::RemoteEmbedder
    };
    EmbeddingTable::new(kind, index.ids().to_vec(), Tensor::from_rows(&vectors)?, source)
}

/// Embeds the diagnosis-stage text of every entity.
pub fn embed_diagnoses(
    records: &[DiagnosisRecord],
    indices: &Indices,
    embedder: &Embedder,
    transport: &dyn Transport,
) -> Result<EmbeddingTables> {
    let texts: BTreeMap<(EntityKind, &str), &str> = records
        .iter()
        .filter(|r| r.stage == Stage::Diagnosis)
        .map(|r| ((r.kind, r.id.as_str()), r.text.as_str()))
        .collect();
    Ok(EmbeddingTables {
        students: table_for(EntityKind::Student, &indices.students, &texts, embedder, transport)?,
        exercises: table_for(EntityKind::Exercise, &indices.exercises, &texts, embedder, transport)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::split_dataset;
    use crate::llmdiag::client::tests::{online, Scripted};
    use serde_json::json;

    fn logs() -> Vec<ResponseLog> {
        let mut out = Vec::new();
        for s in 0..6 {
            for e in 0..5 {
                if (s + e) % 3 != 0 {
                    out.push(ResponseLog {
                        student_id: format!("s{s}"),
                        exercise_id: format!("e{e}"),
                        concepts: vec![format!("k{}", e % 2)],
                        correct: (s * e) % 2 == 0,
                        content: Some(format!("question {e}")),
                    });
                }
            }
        }
        out
    }

    fn offline() -> EndpointConfig {
        EndpointConfig {
            offline: true,
            ..EndpointConfig::default()
        }
    }

    #[test]
    fn stub_pipeline_is_deterministic_and_complete() {
        let split = split_dataset(&logs(), [0.8, 0.1, 0.1], 3).unwrap();
        let t = Scripted::new(vec![]);
        let a = diagnose_dataset(&split, &offline(), &t, &DiagnosisCache::in_memory()).unwrap();
        let b = diagnose_dataset(&split, &offline(), &t, &DiagnosisCache::in_memory()).unwrap();
        assert_eq!(a, b);
        let n = split.n_students() + split.n_exercises();
        assert_eq!(a.iter().filter(|r| r.stage == Stage::Diagnosis).count(), n);
        let tables = embed_diagnoses(&a, &split.indices, &Embedder::new(offline()), &t).unwrap();
        assert_eq!(tables.students.len(), split.n_students());
        assert_eq!(tables.exercises.source, EmbeddingSource::OfflineStub);
    }

    #[test]
    fn evaluation_labels_never_reach_prompts() {
        let split = split_dataset(&logs(), [0.6, 0.2, 0.2], 5).unwrap();
        let mut flipped = split.clone();
        for log in flipped.valid.iter_mut().chain(flipped.test.iter_mut()) {
            log.correct = !log.correct;
        }
        let t = Scripted::new(vec![]);
        let a = diagnose_dataset(&split, &offline(), &t, &DiagnosisCache::in_memory()).unwrap();
        let b = diagnose_dataset(&flipped, &offline(), &t, &DiagnosisCache::in_memory()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn concurrent_remote_run_keeps_order() {
        let split = split_dataset(&logs(), [0.8, 0.1, 0.1], 3).unwrap();
        let jobs = split.n_students() + split.n_exercises();
        let reply =
            || Ok(json!({ "choices": [{ "message": { "content": "{\"diagnosis\": \"fine\", \"reason\": \"r\"}" } }] }));
        let t = Scripted::new((0..2 * jobs).map(|_| reply()).collect());
        let recs = diagnose_dataset(&split, &online(), &t, &DiagnosisCache::in_memory()).unwrap();
        let diag: Vec<&DiagnosisRecord> = recs.iter().filter(|r| r.stage == Stage::Diagnosis).collect();
        let students: Vec<&str> = diag
            .iter()
            .filter(|r| r.kind == EntityKind::Student)
            .map(|r| r.id.as_str())
            .collect();
        assert_eq!(
            students,
            split
                .indices
                .students
                .ids()
                .iter()
                .map(String::as_str)
                .collect::<Vec<_>>()
        );
    }
}
