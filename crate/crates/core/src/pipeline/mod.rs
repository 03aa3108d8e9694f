//! Training, evaluation, sparsity sweeps and the synthetic data generator.

mod metrics;
mod synthetic;
mod train;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use metrics::{auc, compute_metrics, metrics_csv, Metrics, Subset, ACC_THRESHOLD};
pub use synthetic::{
    concept_id, exercise_id, generate_synthetic, student_id, GroundTruth, SyntheticData, SyntheticSpec,
};
pub use train::{projection_prefix, train, AlignContext, AlignMode, EpochRecord, TrainConfig, TrainOutcome};

use crate::alignment::{AlignmentConfig, EmbeddingTables, EntityKind};
use crate::cdm::{Batch, CdmParameters};
use crate::dataset::{dropout_train, partition_cold_warm, DatasetSplit, FrequencyTable, QMatrix, ResponseLog};
use crate::error::Result;
use crate::numerics::{ParamNodes, Params, Tape};

fn subset_metrics(
    model: &CdmParameters,
    logs: &[ResponseLog],
    split: &DatasetSplit,
    q: &QMatrix,
    subset: Subset,
) -> Result<Option<Metrics>> {
    if logs.is_empty() {
        return Ok(None);
    }
    let batch = Batch::from_logs(logs, &split.indices, q)?;
    let scores = model.predict(&batch)?;
    compute_metrics(&scores, &batch.labels, ACC_THRESHOLD, subset).map(Some)
}

/// Metrics on the full test split and on its cold and warm subsets;
/// empty subsets are left out.
pub fn evaluate_cold_warm(
    model: &CdmParameters,
    split: &DatasetSplit,
    q: &QMatrix,
    freq: &FrequencyTable,
    cold_lt: usize,
    warm_gt: usize,
) -> Result<Vec<Metrics>> {
    let (cold, warm) = partition_cold_warm(&split.test, freq, &split.indices, cold_lt, warm_gt)?;
    let mut rows = Vec::new();
    for (logs, subset) in [(&split.test, Subset::All), (&cold, Subset::Cold), (&warm, Subset::Warm)] {
        if let Some(m) = subset_metrics(model, logs, split, q, subset)? {
            rows.push(m);
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub seed: u64,
    pub metrics: Metrics,
}

/// Retrains from scratch on each (ratio, seed) cell with that fraction of
/// training logs removed and scores the untouched test split.
pub fn dropout_sweep(
    cfg: &TrainConfig,
    split: &DatasetSplit,
    q: &QMatrix,
    embeddings: Option<&EmbeddingTables>,
    align: &AlignmentConfig,
    ratios: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    let cells: Vec<(f64, u64)> = ratios
        .iter()
        .flat_map(|&r| seeds.iter().map(move |&s| (r, s)))
        .collect();
    cells
        .par_iter()
        .map(|&(ratio, seed)| {
            let kept = dropout_train(&split.train, ratio, seed)?;
            let sub = DatasetSplit {
                train: kept,
                valid: split.valid.clone(),
                test: split.test.clone(),
                indices: split.indices.clone(),
            };
            let cell_cfg = TrainConfig { seed, ..cfg.clone() };
            let outcome = train(&cell_cfg, &sub, q, embeddings, align)?;
            let metrics = subset_metrics(&outcome.model, &sub.test, &sub, q, Subset::All)?
                .ok_or_else(|| crate::error::Error::config("test split is empty"))?;
            Ok(SweepRow { ratio, seed, metrics })
        })
        .collect()
}

/// CSV with header `ratio,seed,auc,acc,rmse`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("ratio,seed,auc,acc,rmse\n");
    for r in rows {
        let auc = r.metrics.auc.map(|v| format!("{v:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{auc},{:.6},{:.6}\n",
            r.ratio, r.seed, r.metrics.acc, r.metrics.rmse
        ));
    }
    out
}

/// One JSON object per epoch.
pub fn history_jsonl(history: &[EpochRecord]) -> Result<String> {
    let mut out = String::new();
    for h in history {
        out.push_str(&serde_json::to_string(h)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportRow {
    pub kind: EntityKind,
    pub id: String,
    pub behavioral: Vec<f64>,
    /// Semantic vector mapped into the behavioral space, when a
    /// semantic→behavioral projection was trained.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_projected: Option<Vec<f64>>,
}

/// Behavioral embeddings of every entity, paired with projected semantic
/// vectors when available.
pub fn export_embeddings(
    outcome: &TrainOutcome,
    split: &DatasetSplit,
    tables: Option<&EmbeddingTables>,
) -> Result<Vec<ExportRow>> {
    let cdm = &outcome.model.model;
    let mut tape = Tape::new();
    let mut nodes = ParamNodes::new();
    for (name, value) in &outcome.model.params {
        nodes.insert(name.clone(), tape.constant(value.clone())?);
    }
    let students: Vec<usize> = (0..split.n_students()).collect();
    let exercises: Vec<usize> = (0..split.n_exercises()).collect();
    let cs = cdm.student_embedding(&mut tape, &nodes, &students)?;
    let ce = cdm.exercise_embedding(&mut tape, &nodes, &exercises)?;
    let beh = [
        (EntityKind::Student, tape.value(cs).clone()),
        (EntityKind::Exercise, tape.value(ce).clone()),
    ];

    let projected = |kind: EntityKind| -> Result<Option<crate::numerics::Tensor>> {
        let (Some(tables), AlignMode::Beh) = (tables, outcome.config.align) else {
            return Ok(None);
        };
        let table = tables.get(kind);
        let prefix = projection_prefix(AlignMode::Beh, kind);
        let proj_params: Params = outcome
            .projections
            .iter()
            .filter(|(k, _)| k.starts_with(&prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let block = |part: &str| {
            proj_params
                .get(&format!("{prefix}.{part}"))
                .ok_or_else(|| crate::error::Error::contract(format!("checkpoint lacks {prefix}.{part}")))
        };
        let (w1, w2) = (block("w1")?, block("w2")?);
        let net = crate::alignment::ProjectionNet::new(
            prefix,
            crate::alignment::Direction::SemanticToBehavioral,
            w1.rows(),
            w1.cols(),
            w2.cols(),
        );
        net.apply(&proj_params, &table.matrix).map(Some)
    };

    let mut rows = Vec::new();
    for (kind, matrix) in beh {
        let index = match kind {
            EntityKind::Student => &split.indices.students,
            EntityKind::Exercise => &split.indices.exercises,
        };
        let proj = projected(kind)?;
        for i in 0..index.len() {
            rows.push(ExportRow {
                kind,
                id: index.id(i).to_string(),
                behavioral: matrix.row(i).to_vec(),
                semantic_projected: proj.as_ref().map(|p| p.row(i).to_vec()),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests;
