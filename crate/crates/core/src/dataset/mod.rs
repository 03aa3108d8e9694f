//! Response logs, train/valid/test partitioning, the exercise–concept
//! incidence matrix, interaction counts and the sparsity experiments'
//! subset rules.

mod io;

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use io::{parse_response_logs, parse_response_logs_as, write_response_logs, LogFormat};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One student's answer to one exercise.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ResponseLog {
    pub student_id: String,
    pub exercise_id: String,
    /// Non-empty, duplicate-free, in first-appearance order.
    pub concepts: Vec<String>,
    pub correct: bool,
    pub content: Option<String>,
}

impl ResponseLog {
    pub fn label(&self) -> f64 {
        if self.correct {
            1.0
        } else {
            0.0
        }
    }
}

/// Bijection between opaque ids and dense indices, in first-appearance order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EntityIndex {
    ids: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl EntityIndex {
    pub fn from_ids(ids: Vec<String>) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if lookup.insert(id.clone(), i).is_some() {
                return Err(Error::config(format!("duplicate id {id:?} in index")));
            }
        }
        Ok(Self { ids, lookup })
    }

    /// Index of `id`, inserting it if unseen.
    pub fn intern(&mut self, id: &str) -> usize {
        if let Some(&i) = self.lookup.get(id) {
            return i;
        }
        let i = self.ids.len();
        self.ids.push(id.to_string());
        self.lookup.insert(id.to_string(), i);
        i
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    pub fn require(&self, id: &str) -> Result<usize> {
        self.get(id)
            .ok_or_else(|| Error::contract(format!("unknown id {id:?}")))
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl Serialize for EntityIndex {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.ids.serialize(s)
    }
}

impl<'de> Deserialize<'de> for EntityIndex {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let ids = Vec::<String>::deserialize(d)?;
        EntityIndex::from_ids(ids).map_err(serde::de::Error::custom)
    }
}

/// Dense indices for the three entity kinds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Indices {
    pub students: EntityIndex,
    pub exercises: EntityIndex,
    pub concepts: EntityIndex,
}

impl Indices {
    pub fn build<'a>(logs: impl IntoIterator<Item = &'a ResponseLog>) -> Self {
        let mut idx = Indices::default();
        for log in logs {
            idx.students.intern(&log.student_id);
            idx.exercises.intern(&log.exercise_id);
            for c in &log.concepts {
                idx.concepts.intern(c);
            }
        }
        idx
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<ResponseLog>,
    pub valid: Vec<ResponseLog>,
    pub test: Vec<ResponseLog>,
    pub indices: Indices,
}

impl DatasetSplit {
    /// Assembles a split; every log must be covered by `indices`.
    pub fn from_parts(
        train: Vec<ResponseLog>,
        valid: Vec<ResponseLog>,
        test: Vec<ResponseLog>,
        indices: Indices,
    ) -> Result<Self> {
        for log in train.iter().chain(&valid).chain(&test) {
            indices.students.require(&log.student_id)?;
            indices.exercises.require(&log.exercise_id)?;
            for c in &log.concepts {
                indices.concepts.require(c)?;
            }
        }
        Ok(Self {
            train,
            valid,
            test,
            indices,
        })
    }

    pub fn all_logs(&self) -> impl Iterator<Item = &ResponseLog> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    pub fn n_students(&self) -> usize {
        self.indices.students.len()
    }

    pub fn n_exercises(&self) -> usize {
        self.indices.exercises.len()
    }

    pub fn n_concepts(&self) -> usize {
        self.indices.concepts.len()
    }

    /// Writes `train.jsonl`, `valid.jsonl`, `test.jsonl` and `index.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, logs) in [("train", &self.train), ("valid", &self.valid), ("test", &self.test)] {
            let text = write_response_logs(logs, LogFormat::JsonLines)?;
            std::fs::write(dir.join(format!("{name}.jsonl")), text)?;
        }
        std::fs::write(dir.join("index.json"), serde_json::to_string_pretty(&self.indices)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<Vec<ResponseLog>> {
            let text = std::fs::read_to_string(dir.join(name))?;
            parse_response_logs(&text)
        };
        let indices: Indices = serde_json::from_str(&std::fs::read_to_string(dir.join("index.json"))?)?;
        Self::from_parts(read("train.jsonl")?, read("valid.jsonl")?, read("test.jsonl")?, indices)
    }
}

pub(crate) const SPLIT_TOLERANCE: f64 = 1e-9;

fn check_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::config(format!(
            "split ratios must be non-negative, got {ratios:?}"
        )));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > SPLIT_TOLERANCE {
        return Err(Error::config(format!("split ratios sum to {total}, expected 1")));
    }
    Ok(())
}

/// Seeded uniform shuffle, then valid/test take `floor(ratio · N)` each and
/// train keeps the remainder. Indices cover every log in input order.
pub fn split_dataset(logs: &[ResponseLog], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    check_ratios(ratios)?;
    if logs.len() < 3 {
        return Err(Error::contract(format!(
            "need at least 3 logs to split, got {}",
            logs.len()
        )));
    }
    let n = logs.len();
    let indices = Indices::build(logs);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let count = |r: f64| ((r * n as f64) + SPLIT_TOLERANCE).floor() as usize;
    let n_valid = count(ratios[1]);
    let n_test = count(ratios[2]);
    let n_train = n - n_valid - n_test;

    let take =
        |range: std::ops::Range<usize>| -> Vec<ResponseLog> { order[range].iter().map(|&i| logs[i].clone()).collect() };
    Ok(DatasetSplit {
        train: take(0..n_train),
        valid: take(n_train..n_train + n_valid),
        test: take(n_train + n_valid..n),
        indices,
    })
}

/// Exercise × concept binary incidence.
#[derive(Clone, Debug, PartialEq)]
pub struct QMatrix {
    rows: Tensor,
}

impl QMatrix {
    pub fn matrix(&self) -> &Tensor {
        &self.rows
    }

    pub fn row(&self, exercise: usize) -> &[f64] {
        self.rows.row(exercise)
    }

    pub fn concepts_of(&self, exercise: usize) -> Vec<usize> {
        self.row(exercise)
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(k, _)| k)
            .collect()
    }

    pub fn n_exercises(&self) -> usize {
        self.rows.rows()
    }

    pub fn n_concepts(&self) -> usize {
        self.rows.cols()
    }

    /// Rows for a batch of exercises.
    pub fn gather(&self, exercises: &[usize]) -> Result<Tensor> {
        self.rows.gather_rows(exercises)
    }
}

/// Union of concept tags over every split; tags are exercise metadata.
pub fn build_q_matrix(split: &DatasetSplit) -> Result<QMatrix> {
    let e = split.n_exercises();
    let k = split.n_concepts();
    let mut rows = Tensor::zeros(e, k);
    for log in split.all_logs() {
        let j = split.indices.exercises.require(&log.exercise_id)?;
        for c in &log.concepts {
            let kk = split.indices.concepts.require(c)?;
            rows.row_mut(j)[kk] = 1.0;
        }
    }
    Ok(QMatrix { rows })
}

/// Interaction counts per student and exercise over the training split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyTable {
    pub students: Vec<usize>,
    pub exercises: Vec<usize>,
}

impl FrequencyTable {
    pub fn from_train(train: &[ResponseLog], indices: &Indices) -> Result<Self> {
        let mut students = vec![0; indices.students.len()];
        let mut exercises = vec![0; indices.exercises.len()];
        for log in train {
            students[indices.students.require(&log.student_id)?] += 1;
            exercises[indices.exercises.require(&log.exercise_id)?] += 1;
        }
        Ok(Self { students, exercises })
    }

    pub fn total(&self) -> usize {
        self.students.iter().sum()
    }
}

pub const DEFAULT_COLD_LT: usize = 3;
pub const DEFAULT_WARM_GT: usize = 10;

/// Test logs whose exercise has fewer than `cold_lt` training interactions
/// (cold) or more than `warm_gt` (warm). Counts in between belong to neither.
pub fn partition_cold_warm(
    test: &[ResponseLog],
    freq: &FrequencyTable,
    indices: &Indices,
    cold_lt: usize,
    warm_gt: usize,
) -> Result<(Vec<ResponseLog>, Vec<ResponseLog>)> {
    if cold_lt > warm_gt + 1 {
        return Err(Error::config(format!(
            "cold threshold <{cold_lt} overlaps warm threshold >{warm_gt}"
        )));
    }
    let mut cold = Vec::new();
    let mut warm = Vec::new();
    for log in test {
        let count = freq.exercises[indices.exercises.require(&log.exercise_id)?];
        if count < cold_lt {
            cold.push(log.clone());
        } else if count > warm_gt {
            warm.push(log.clone());
        }
    }
    Ok((cold, warm))
}

/// Keeps `round(N · (1 − ratio))` logs chosen by a seeded shuffle, in
/// their original order.
pub fn dropout_train(train: &[ResponseLog], ratio: f64, seed: u64) -> Result<Vec<ResponseLog>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::config(format!("dropout ratio must be in [0, 1), got {ratio}")));
    }
    let keep = (train.len() as f64 * (1.0 - ratio)).round() as usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept.into_iter().map(|i| train[i].clone()).collect())
}

/// The sparsity sweep's default dropout ratios.
pub const DEFAULT_DROPOUT_RATIOS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
