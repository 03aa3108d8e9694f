//! Alignment between the models' behavioral embeddings and semantic
//! embeddings of textual diagnoses.
//!
//! Two objectives are provided:
//!
//! * behavioral-space contrast: semantic rows are projected into the
//!   behavioral space and contrasted with the model's embeddings against
//!   the whole table (global) and against each entity's nearest semantic
//!   neighbours (local);
//! * semantic-space reconstruction: behavioral embeddings are masked with
//!   a frequency-dependent ratio, projected into the semantic space and
//!   contrasted against the semantic table.
//!
//! Every similarity is a dot product of L2-normalized rows.

mod masking;
mod neighbors;
mod table;

use std::collections::HashMap;
use std::hash::Hash;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use masking::{mask_embedding, mask_pattern, mask_ratio};
pub use neighbors::{topk_neighbors, NeighborIndex};
pub use table::{
    load_embeddings_jsonl, write_embeddings_jsonl, EmbeddingSource, EmbeddingTable, EmbeddingTables, EntityKind,
};

use crate::cdm::xavier;
use crate::error::{Error, Result};
use crate::numerics::{NodeId, ParamNodes, Params, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    /// Weight of the global contrast term.
    pub alpha: f64,
    /// Weight of the local contrast term.
    pub beta: f64,
    /// Weight of the reconstruction term.
    pub lambda: f64,
    /// Contrast temperature.
    pub tau: f64,
    /// Neighbours per entity for local contrast.
    pub k: usize,
    pub r_min: f64,
    pub r_max: f64,
    /// Tables larger than this are subsampled for negatives each step.
    pub negative_cap: usize,
    /// Hidden width of the projection networks.
    pub projection_hidden: usize,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            alpha: 0.04,
            beta: 0.015,
            lambda: 0.2,
            tau: 0.2,
            k: 20,
            r_min: 0.1,
            r_max: 0.5,
            negative_cap: 8192,
            projection_hidden: 512,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0 <= self.r_min && self.r_min <= self.r_max && self.r_max < 1.0) {
            return Err(Error::config(format!(
                "mask ratio bounds must satisfy 0 <= r_min <= r_max < 1, got {}..{}",
                self.r_min, self.r_max
            )));
        }
        if self.k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        if [self.alpha, self.beta, self.lambda].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::config("alignment weights must be non-negative"));
        }
        if self.negative_cap == 0 || self.projection_hidden == 0 {
            return Err(Error::config("negative cap and projection width must be positive"));
        }
        Ok(())
    }
}

/// Which direction a projection network maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    SemanticToBehavioral,
    BehavioralToSemantic,
}

/// One hidden rectified layer followed by a linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionNet {
    pub prefix: String,
    pub direction: Direction,
    pub input_dim: usize,
    pub hidden: usize,
    pub output_dim: usize,
}

impl ProjectionNet {
    pub fn new(
        prefix: impl Into<String>,
        direction: Direction,
        input_dim: usize,
        hidden: usize,
        output_dim: usize,
    ) -> Self {
        Self {
            prefix: prefix.into(),
            direction,
            input_dim,
            hidden,
            output_dim,
        }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init(&self, rng: &mut impl Rng, params: &mut Params) {
        params.insert(self.name("w1"), xavier(self.input_dim, self.hidden, rng));
        params.insert(self.name("b1"), Tensor::zeros(1, self.hidden));
        params.insert(self.name("w2"), xavier(self.hidden, self.output_dim, rng));
        params.insert(self.name("b2"), Tensor::zeros(1, self.output_dim));
    }

    pub fn forward(&self, tape: &mut Tape, nodes: &ParamNodes, input: NodeId) -> Result<NodeId> {
        let (_, cols) = tape.value(input).dims();
        if cols != self.input_dim {
            return Err(Error::Shape {
                op: "projection",
                left: vec![cols],
                right: vec![self.input_dim],
            });
        }
        let p = |part: &str| {
            nodes
                .get(&self.name(part))
                .copied()
                .ok_or_else(|| Error::contract(format!("missing parameter block {}", self.name(part))))
        };
        let z = tape.matmul(input, p("w1")?)?;
        let z = tape.add(z, p("b1")?)?;
        let h = tape.relu(z)?;
        let o = tape.matmul(h, p("w2")?)?;
        tape.add(o, p("b2")?)
    }

    /// Evaluates the network on plain rows.
    pub fn apply(&self, params: &Params, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut nodes = ParamNodes::new();
        for part in ["w1", "b1", "w2", "b2"] {
            let name = self.name(part);
            let value = params
                .get(&name)
                .ok_or_else(|| Error::contract(format!("missing parameter block {name}")))?;
            nodes.insert(name, tape.constant(value.clone())?);
        }
        let x = tape.constant(input.clone())?;
        let out = self.forward(&mut tape, &nodes, x)?;
        Ok(tape.value(out).clone())
    }
}

/// InfoNCE on the tape:
/// `−(1/N) Σ_i [ x_i·y_{p_i}/τ − log Σ_{j ∈ C_i} exp(x_i·y_j/τ) ]`
/// where `C_i` is every candidate, or the non-zero entries of row `i` of
/// `candidate_mask`. Rows are L2-normalized first; the positive is part of
/// the denominator.
pub fn info_nce_node(
    tape: &mut Tape,
    anchors: NodeId,
    candidates: NodeId,
    positives: &[usize],
    candidate_mask: Option<Tensor>,
    tau: f64,
) -> Result<NodeId> {
    if !(tau > 0.0) {
        return Err(Error::config(format!("tau must be positive, got {tau}")));
    }
    let n = tape.value(anchors).rows();
    if positives.len() != n {
        return Err(Error::Shape {
            op: "info_nce",
            left: vec![n],
            right: vec![positives.len()],
        });
    }
    if let Some(mask) = &candidate_mask {
        let m = mask.cols();
        for (i, &p) in positives.iter().enumerate() {
            if p >= m || mask.data()[i * m + p] == 0.0 {
                return Err(Error::contract(format!(
                    "candidate mask excludes the positive of anchor {i}"
                )));
            }
        }
    }
    let x = tape.normalize_rows(anchors)?;
    let y = tape.normalize_rows(candidates)?;
    let sims = tape.matmul_nt(x, y)?;
    let logits = tape.scale(sims, 1.0 / tau)?;
    let lse = tape.log_sum_exp_rows(logits, candidate_mask)?;
    let pos = tape.select_per_row(logits, positives)?;
    let terms = tape.sub(lse, pos)?;
    tape.mean(terms)
}

/// InfoNCE on plain rows, pairing each anchor with the candidate that
/// carries the same id.
pub fn info_nce<I: Eq + Hash + std::fmt::Debug>(
    anchors: &Tensor,
    anchor_ids: &[I],
    candidates: &Tensor,
    candidate_ids: &[I],
    tau: f64,
) -> Result<f64> {
    if anchor_ids.len() != anchors.rows() || candidate_ids.len() != candidates.rows() {
        return Err(Error::Shape {
            op: "info_nce",
            left: vec![anchor_ids.len(), anchors.rows()],
            right: vec![candidate_ids.len(), candidates.rows()],
        });
    }
    let lookup: HashMap<&I, usize> = candidate_ids.iter().enumerate().map(|(j, id)| (id, j)).collect();
    let positives = anchor_ids
        .iter()
        .map(|id| {
            lookup
                .get(id)
                .copied()
                .ok_or_else(|| Error::contract(format!("anchor {id:?} has no matching candidate")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::new();
    let a = tape.constant(anchors.clone())?;
    let c = tape.constant(candidates.clone())?;
    let out = info_nce_node(&mut tape, a, c, &positives, None, tau)?;
    tape.value(out).item()
}

/// Candidate rows for one step: the whole table when it fits under the
/// cap, otherwise the required rows plus a uniform sample.
fn candidate_rows(n: usize, required: &[usize], cap: usize, rng: &mut impl Rng) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let mut chosen = vec![false; n];
    let mut rows = Vec::with_capacity(cap.max(required.len()));
    for &r in required {
        if !chosen[r] {
            chosen[r] = true;
            rows.push(r);
        }
    }
    let extra = cap.saturating_sub(rows.len());
    if extra > 0 {
        for r in rand::seq::index::sample(rng, n, n.min(extra + rows.len())) {
            if rows.len() >= cap.max(required.len()) {
                break;
            }
            if !chosen[r] {
                chosen[r] = true;
                rows.push(r);
            }
        }
    }
    rows
}

fn positions(rows: &[usize], n: usize) -> Vec<Option<usize>> {
    let mut pos = vec![None; n];
    for (i, &r) in rows.iter().enumerate() {
        pos[r] = Some(i);
    }
    pos
}

/// Behavioral embeddings of one entity kind within a batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchEmbeddings<'a> {
    pub kind: EntityKind,
    /// `n × d` node holding one row per entity in `ids`.
    pub node: NodeId,
    /// Dense entity indices, distinct.
    pub ids: &'a [usize],
}

#[derive(Clone, Copy, Debug)]
pub struct BehavioralTerms {
    pub global: NodeId,
    pub local: NodeId,
}

/// Global and local contrast of behavioral embeddings against projected
/// semantic rows.
#[allow(clippy::too_many_arguments)]
pub fn behavioral_alignment_loss(
    tape: &mut Tape,
    batch: BatchEmbeddings<'_>,
    table: &EmbeddingTable,
    proj: &ProjectionNet,
    nodes: &ParamNodes,
    index: &NeighborIndex,
    cfg: &AlignmentConfig,
    rng: &mut impl Rng,
) -> Result<BehavioralTerms> {
    if batch.kind != table.kind {
        return Err(Error::contract(format!(
            "{} embeddings contrasted against the {} table",
            batch.kind, table.kind
        )));
    }
    if proj.direction != Direction::SemanticToBehavioral {
        return Err(Error::contract(
            "behavioral contrast needs a semantic→behavioral projection",
        ));
    }
    let n = table.len();
    let mut required: Vec<usize> = batch.ids.to_vec();
    for &i in batch.ids {
        required.extend_from_slice(index.neighbors(i));
    }
    let rows = candidate_rows(n, &required, cfg.negative_cap, rng);
    let pos_of = positions(&rows, n);
    let positives: Vec<usize> = batch.ids.iter().map(|&i| pos_of[i].expect("required row")).collect();

    let semantic = tape.constant(table.matrix.gather_rows(&rows)?)?;
    let projected = proj.forward(tape, nodes, semantic)?;

    let global = info_nce_node(tape, batch.node, projected, &positives, None, cfg.tau)?;

    let m = rows.len();
    let mut mask = Tensor::zeros(batch.ids.len(), m);
    for (a, &i) in batch.ids.iter().enumerate() {
        let row = mask.row_mut(a);
        row[positives[a]] = 1.0;
        for &j in index.neighbors(i) {
            row[pos_of[j].expect("required row")] = 1.0;
        }
    }
    let local = info_nce_node(tape, batch.node, projected, &positives, Some(mask), cfg.tau)?;
    Ok(BehavioralTerms { global, local })
}

/// Masked-reconstruction contrast of projected behavioral embeddings
/// against the semantic table. `freq` holds the training interaction count
/// of every entity of the batch's kind.
#[allow(clippy::too_many_arguments)]
pub fn semantic_alignment_loss(
    tape: &mut Tape,
    batch: BatchEmbeddings<'_>,
    table: &EmbeddingTable,
    proj: &ProjectionNet,
    nodes: &ParamNodes,
    freq: &[usize],
    cfg: &AlignmentConfig,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    if batch.kind != table.kind {
        return Err(Error::contract(format!(
            "{} embeddings contrasted against the {} table",
            batch.kind, table.kind
        )));
    }
    if proj.direction != Direction::BehavioralToSemantic {
        return Err(Error::contract("reconstruction needs a behavioral→semantic projection"));
    }
    if freq.len() != table.len() {
        return Err(Error::Shape {
            op: "semantic_alignment_loss",
            left: vec![freq.len()],
            right: vec![table.len()],
        });
    }
    let dim = tape.value(batch.node).cols();
    let freq_max = freq.iter().copied().max().unwrap_or(0);
    let mut mask = Tensor::zeros(batch.ids.len(), dim);
    for (a, &i) in batch.ids.iter().enumerate() {
        let ratio = mask_ratio(freq[i], freq_max, dim, cfg)?;
        mask.row_mut(a).copy_from_slice(&mask_pattern(dim, ratio, rng));
    }
    let masked = tape.mask_mul(batch.node, mask)?;
    let projected = proj.forward(tape, nodes, masked)?;

    let n = table.len();
    let rows = candidate_rows(n, batch.ids, cfg.negative_cap, rng);
    let pos_of = positions(&rows, n);
    let positives: Vec<usize> = batch.ids.iter().map(|&i| pos_of[i].expect("required row")).collect();
    let semantic = tape.constant(table.matrix.gather_rows(&rows)?)?;
    info_nce_node(tape, projected, semantic, &positives, None, cfg.tau)
}
