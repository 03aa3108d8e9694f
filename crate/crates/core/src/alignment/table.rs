use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{EntityIndex, Indices};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Student,
    Exercise,
}

impl EntityKind {
    pub fn name(self) -> &'static str {
        match self {
            EntityKind::Student => "student",
            EntityKind::Exercise => "exercise",
        }
    }
}

impl std::fmt::Display for EntityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingSource {
    RemoteEmbedder,
    OfflineStub,
    Synthetic,
}

/// Semantic vectors for one entity kind, rows in dense-index order and
/// L2-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub kind: EntityKind,
    pub ids: Vec<String>,
    pub matrix: Tensor,
    pub source: EmbeddingSource,
}

impl EmbeddingTable {
    /// Builds a table, normalizing rows; zero or non-finite rows are rejected.
    pub fn new(kind: EntityKind, ids: Vec<String>, matrix: Tensor, source: EmbeddingSource) -> Result<Self> {
        if ids.len() != matrix.rows() {
            return Err(Error::Shape {
                op: "embedding_table",
                left: vec![ids.len()],
                right: matrix.shape().to_vec(),
            });
        }
        matrix.check_finite("embedding_table")?;
        for (i, id) in ids.iter().enumerate() {
            let norm: f64 = matrix.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) {
                return Err(Error::config(format!("{kind} {id:?} has a zero embedding")));
            }
        }
        Ok(Self {
            kind,
            ids,
            matrix: matrix.l2_normalized_rows(),
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }
}

/// Student and exercise tables for one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTables {
    pub students: EmbeddingTable,
    pub exercises: EmbeddingTable,
}

impl EmbeddingTables {
    pub fn get(&self, kind: EntityKind) -> &EmbeddingTable {
        match kind {
            EntityKind::Student => &self.students,
            EntityKind::Exercise => &self.exercises,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingRow {
    kind: EntityKind,
    id: String,
    vector: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<EmbeddingSource>,
}

/// One JSON object per row: `{kind, id, vector}`.
pub fn write_embeddings_jsonl(tables: &[&EmbeddingTable]) -> Result<String> {
    let mut out = String::new();
    for t in tables {
        for (i, id) in t.ids.iter().enumerate() {
            let row = EmbeddingRow {
                kind: t.kind,
                id: id.clone(),
                vector: t.matrix.row(i).to_vec(),
                source: Some(t.source),
            };
            out.push_str(&serde_json::to_string(&row)?);
            out.push('\n');
        }
    }
    Ok(out)
}

fn order_rows(
    kind: EntityKind,
    rows: &BTreeMap<String, Vec<f64>>,
    index: &EntityIndex,
    source: EmbeddingSource,
) -> Result<EmbeddingTable> {
    if rows.len() != index.len() {
        let missing: Vec<&str> = index
            .ids()
            .iter()
            .filter(|id| !rows.contains_key(*id))
            .take(5)
            .map(String::as_str)
            .collect();
        return Err(Error::config(format!(
            "{kind} embeddings: {} rows for {} entities (missing e.g. {missing:?})",
            rows.len(),
            index.len()
        )));
    }
    let dim = rows.values().next().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(index.len() * dim);
    for id in index.ids() {
        let v = rows
            .get(id)
            .ok_or_else(|| Error::config(format!("{kind} {id:?} has no embedding")))?;
        data.extend_from_slice(v);
    }
    EmbeddingTable::new(
        kind,
        index.ids().to_vec(),
        Tensor::matrix(index.len(), dim, data)?,
        source,
    )
}

/// Loads both tables, reordering rows to the dataset's dense indices.
pub fn load_embeddings_jsonl(text: &str, indices: &Indices) -> Result<EmbeddingTables> {
    let mut students = BTreeMap::new();
    let mut exercises = BTreeMap::new();
    let mut dim: Option<usize> = None;
    let mut source = EmbeddingSource::RemoteEmbedder;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: EmbeddingRow = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if *dim.get_or_insert(row.vector.len()) != row.vector.len() || row.vector.is_empty() {
            return Err(Error::Validation {
                line: i + 1,
                message: format!("vector width {} differs from {dim:?}", row.vector.len()),
            });
        }
        if let Some(s) = row.source {
            source = s;
        }
        let (map, index) = match row.kind {
            EntityKind::Student => (&mut students, &indices.students),
            EntityKind::Exercise => (&mut exercises, &indices.exercises),
        };
        if index.get(&row.id).is_none() {
            return Err(Error::Validation {
                line: i + 1,
                message: format!("{} {:?} is not in the dataset", row.kind, row.id),
            });
        }
        if map.insert(row.id.clone(), row.vector).is_some() {
            return Err(Error::Validation {
                line: i + 1,
                message: format!("duplicate {} {:?}", row.kind, row.id),
            });
        }
    }
    Ok(EmbeddingTables {
        students: order_rows(EntityKind::Student, &students, &indices.students, source)?,
        exercises: order_rows(EntityKind::Exercise, &exercises, &indices.exercises, source)?,
    })
}
