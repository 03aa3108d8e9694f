//! Cognitive diagnosis models: IRT, MIRT, DINA and NCD.
//!
//! Each model owns a set of named parameter blocks. The student and
//! exercise blocks form the behavioral embeddings that the alignment
//! objectives act on.

mod scalar;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use scalar::{
    bce_loss, predict_dina, predict_irt, predict_mirt, predict_ncd, sigmoid, NcdLayers, Prediction, PROB_CLAMP,
};

use crate::dataset::{Indices, QMatrix, ResponseLog};
use crate::error::{Error, Result};
use crate::numerics::{NodeId, ParamNodes, Params, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Irt,
    Mirt,
    Dina,
    Ncd,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Irt => "irt",
            ModelKind::Mirt => "mirt",
            ModelKind::Dina => "dina",
            ModelKind::Ncd => "ncd",
        }
    }

    pub const ALL: [ModelKind; 4] = [ModelKind::Irt, ModelKind::Mirt, ModelKind::Dina, ModelKind::Ncd];
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "irt" => Ok(ModelKind::Irt),
            "mirt" => Ok(ModelKind::Mirt),
            "dina" => Ok(ModelKind::Dina),
            "ncd" => Ok(ModelKind::Ncd),
            other => Err(Error::config(format!("unknown model {other:?}"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Latent dimension for MIRT.
    pub mirt_dim: usize,
    /// Hidden widths of the NCD prediction layers.
    pub ncd_hidden: [usize; 2],
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            mirt_dim: 16,
            ncd_hidden: [512, 256],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub students: usize,
    pub exercises: usize,
    pub concepts: usize,
}

impl ModelDims {
    pub fn of(indices: &Indices) -> Self {
        Self {
            students: indices.students.len(),
            exercises: indices.exercises.len(),
            concepts: indices.concepts.len(),
        }
    }
}

/// Dense indices, labels and Q-matrix rows for a group of interactions.
#[derive(Clone, Debug)]
pub struct Batch {
    pub students: Vec<usize>,
    pub exercises: Vec<usize>,
    pub labels: Vec<f64>,
    pub q_rows: Tensor,
}

impl Batch {
    pub fn from_logs<'a>(
        logs: impl IntoIterator<Item = &'a ResponseLog>,
        indices: &Indices,
        q: &QMatrix,
    ) -> Result<Self> {
        let mut students = Vec::new();
        let mut exercises = Vec::new();
        let mut labels = Vec::new();
        for log in logs {
            students.push(indices.students.require(&log.student_id)?);
            exercises.push(indices.exercises.require(&log.exercise_id)?);
            labels.push(log.label());
        }
        let q_rows = q.gather(&exercises)?;
        Ok(Self {
            students,
            exercises,
            labels,
            q_rows,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Distinct students in first-appearance order.
    pub fn unique_students(&self) -> Vec<usize> {
        unique(&self.students)
    }

    pub fn unique_exercises(&self) -> Vec<usize> {
        unique(&self.exercises)
    }
}

fn unique(xs: &[usize]) -> Vec<usize> {
    let mut seen = std::collections::HashSet::new();
    xs.iter().copied().filter(|x| seen.insert(*x)).collect()
}

/// Names of the NCD prediction-layer weight blocks.
pub const NCD_LAYER_WEIGHTS: [&str; 3] = ["ncd.w1", "ncd.w2", "ncd.w3"];

pub(crate) const INIT_RANGE: f64 = 0.01;
/// Initial slip and guess probability for DINA.
pub(crate) const DINA_INIT_PROB: f64 = 0.2;

pub(crate) fn uniform(rows: usize, cols: usize, range: f64, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-range..=range)).collect();
    Tensor::matrix(rows, cols, data).expect("sized buffer")
}

pub(crate) fn xavier(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(fan_in, fan_out, bound, rng)
}

/// A model's structure; parameter values live in a separate [`Params`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cdm {
    pub config: ModelConfig,
    pub dims: ModelDims,
}

/// A model together with its learned parameter blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct CdmParameters {
    pub model: Cdm,
    pub params: Params,
}

impl CdmParameters {
    pub fn predict(&self, batch: &Batch) -> Result<Vec<f64>> {
        self.model.predict(&self.params, batch)
    }
}

impl Cdm {
    pub fn new(config: ModelConfig, dims: ModelDims) -> Result<Self> {
        if dims.students == 0 || dims.exercises == 0 || dims.concepts == 0 {
            return Err(Error::config(format!(
                "model needs non-empty entity sets, got {dims:?}"
            )));
        }
        if config.mirt_dim == 0 || config.ncd_hidden.contains(&0) {
            return Err(Error::config("model widths must be positive"));
        }
        Ok(Self { config, dims })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    /// Width of the student behavioral embedding.
    pub fn student_dim(&self) -> usize {
        match self.kind() {
            ModelKind::Irt => 1,
            ModelKind::Mirt => self.config.mirt_dim,
            ModelKind::Dina | ModelKind::Ncd => self.dims.concepts,
        }
    }

    /// Width of the exercise behavioral embedding.
    pub fn exercise_dim(&self) -> usize {
        match self.kind() {
            ModelKind::Irt | ModelKind::Dina => 2,
            ModelKind::Mirt => self.config.mirt_dim + 1,
            ModelKind::Ncd => self.dims.concepts + 1,
        }
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> Params {
        let ModelDims {
            students: s,
            exercises: e,
            concepts: k,
        } = self.dims;
        let mut p = Params::new();
        let mut put = |name: &str, t: Tensor| {
            p.insert(name.to_string(), t);
        };
        match self.kind() {
            ModelKind::Irt => {
                put("irt.theta", uniform(s, 1, INIT_RANGE, rng));
                put("irt.a", uniform(e, 1, INIT_RANGE, rng));
                put("irt.b", uniform(e, 1, INIT_RANGE, rng));
            }
            ModelKind::Mirt => {
                let d = self.config.mirt_dim;
                put("mirt.theta", uniform(s, d, INIT_RANGE, rng));
                put("mirt.a", uniform(e, d, INIT_RANGE, rng));
                put("mirt.b", uniform(e, 1, INIT_RANGE, rng));
            }
            ModelKind::Dina => {
                let logit = (DINA_INIT_PROB / (1.0 - DINA_INIT_PROB)).ln();
                put("dina.mastery", uniform(s, k, INIT_RANGE, rng));
                put("dina.slip", uniform(e, 1, INIT_RANGE, rng).map(|v| v + logit));
                put("dina.guess", uniform(e, 1, INIT_RANGE, rng).map(|v| v + logit));
            }
            ModelKind::Ncd => {
                let [h1, h2] = self.config.ncd_hidden;
                put("ncd.student", uniform(s, k, INIT_RANGE, rng));
                put("ncd.difficulty", uniform(e, k, INIT_RANGE, rng));
                put("ncd.discrimination", uniform(e, 1, INIT_RANGE, rng));
                put("ncd.w1", xavier(k, h1, rng));
                put("ncd.b1", Tensor::zeros(1, h1));
                put("ncd.w2", xavier(h1, h2, rng));
                put("ncd.b2", Tensor::zeros(1, h2));
                put("ncd.w3", xavier(h2, 1, rng));
                put("ncd.b3", Tensor::zeros(1, 1));
            }
        }
        project_nonneg(self.kind(), &mut p);
        if self.kind() == ModelKind::Ncd {
            center_ncd_biases(&mut p);
        }
        p
    }

    fn node(nodes: &ParamNodes, name: &str) -> Result<NodeId> {
        nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("missing parameter block {name}")))
    }

    /// Probability of a correct answer for every interaction (`B × 1`).
    pub fn forward(&self, tape: &mut Tape, nodes: &ParamNodes, batch: &Batch) -> Result<NodeId> {
        let p = |name: &str| Self::node(nodes, name);
        match self.kind() {
            ModelKind::Irt => {
                let theta = tape.gather_rows(p("irt.theta")?, &batch.students)?;
                let a = tape.gather_rows(p("irt.a")?, &batch.exercises)?;
                let b = tape.gather_rows(p("irt.b")?, &batch.exercises)?;
                let diff = tape.sub(theta, b)?;
                let z = tape.mul(a, diff)?;
                tape.sigmoid(z)
            }
            ModelKind::Mirt => {
                let theta = tape.gather_rows(p("mirt.theta")?, &batch.students)?;
                let a = tape.gather_rows(p("mirt.a")?, &batch.exercises)?;
                let b = tape.gather_rows(p("mirt.b")?, &batch.exercises)?;
                let prod = tape.mul(theta, a)?;
                let dot = tape.sum_cols(prod)?;
                let z = tape.sub(dot, b)?;
                tape.sigmoid(z)
            }
            ModelKind::Dina => {
                if let Some(i) = (0..batch.len()).find(|&i| batch.q_rows.row(i).iter().all(|&v| v == 0.0)) {
                    return Err(Error::contract(format!(
                        "exercise {} has no required concept",
                        batch.exercises[i]
                    )));
                }
                let logits = tape.gather_rows(p("dina.mastery")?, &batch.students)?;
                let mastery = tape.sigmoid(logits)?;
                let eta = tape.masked_row_product(mastery, batch.q_rows.clone())?;
                let s_logit = tape.gather_rows(p("dina.slip")?, &batch.exercises)?;
                let g_logit = tape.gather_rows(p("dina.guess")?, &batch.exercises)?;
                let s = tape.sigmoid(s_logit)?;
                let g = tape.sigmoid(g_logit)?;
                // g (1 − η) + (1 − s) η = g + η (1 − s − g)
                let one_minus_s = tape.affine(s, -1.0, 1.0)?;
                let gap = tape.sub(one_minus_s, g)?;
                let lift = tape.mul(eta, gap)?;
                tape.add(g, lift)
            }
            ModelKind::Ncd => {
                let q = tape.constant(batch.q_rows.clone())?;
                let stu = tape.gather_rows(p("ncd.student")?, &batch.students)?;
                let dif = tape.gather_rows(p("ncd.difficulty")?, &batch.exercises)?;
                let disc = tape.gather_rows(p("ncd.discrimination")?, &batch.exercises)?;
                let hs = tape.sigmoid(stu)?;
                let hd = tape.sigmoid(dif)?;
                let ed = tape.sigmoid(disc)?;
                let gap = tape.sub(hs, hd)?;
                let masked = tape.mul(q, gap)?;
                let x = tape.mul(masked, ed)?;
                let mut h = x;
                for (w, b) in [("ncd.w1", "ncd.b1"), ("ncd.w2", "ncd.b2"), ("ncd.w3", "ncd.b3")] {
                    let z = tape.matmul(h, p(w)?)?;
                    let z = tape.add(z, p(b)?)?;
                    h = tape.sigmoid(z)?;
                }
                Ok(h)
            }
        }
    }

    /// Summed binary cross-entropy of the batch (scalar node).
    pub fn loss(&self, tape: &mut Tape, nodes: &ParamNodes, batch: &Batch) -> Result<NodeId> {
        let probs = self.forward(tape, nodes, batch)?;
        bce_node(tape, probs, &batch.labels)
    }

    /// Behavioral embeddings of the given students (`n × student_dim`).
    pub fn student_embedding(&self, tape: &mut Tape, nodes: &ParamNodes, ids: &[usize]) -> Result<NodeId> {
        let block = match self.kind() {
            ModelKind::Irt => "irt.theta",
            ModelKind::Mirt => "mirt.theta",
            ModelKind::Dina => "dina.mastery",
            ModelKind::Ncd => "ncd.student",
        };
        tape.gather_rows(Self::node(nodes, block)?, ids)
    }

    /// Behavioral embeddings of the given exercises (`n × exercise_dim`).
    pub fn exercise_embedding(&self, tape: &mut Tape, nodes: &ParamNodes, ids: &[usize]) -> Result<NodeId> {
        let blocks: [&str; 2] = match self.kind() {
            ModelKind::Irt => ["irt.a", "irt.b"],
            ModelKind::Mirt => ["mirt.a", "mirt.b"],
            ModelKind::Dina => ["dina.slip", "dina.guess"],
            ModelKind::Ncd => ["ncd.difficulty", "ncd.discrimination"],
        };
        let first = tape.gather_rows(Self::node(nodes, blocks[0])?, ids)?;
        let second = tape.gather_rows(Self::node(nodes, blocks[1])?, ids)?;
        tape.concat_cols(&[first, second])
    }

    /// Forward pass with parameters held constant.
    pub fn predict(&self, params: &Params, batch: &Batch) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut nodes = ParamNodes::new();
        for (name, value) in params {
            if name.starts_with(self.kind().name()) {
                nodes.insert(name.clone(), tape.constant(value.clone())?);
            }
        }
        let out = self.forward(&mut tape, &nodes, batch)?;
        Ok(tape.value(out).data().to_vec())
    }

    pub fn ncd_layers(&self, params: &Params) -> Result<NcdLayers> {
        let get = |n: &str| {
            params
                .get(n)
                .cloned()
                .ok_or_else(|| Error::contract(format!("missing parameter block {n}")))
        };
        Ok(NcdLayers {
            w1: get("ncd.w1")?,
            b1: get("ncd.b1")?,
            w2: get("ncd.w2")?,
            b2: get("ncd.b2")?,
            w3: get("ncd.w3")?,
            b3: get("ncd.b3")?,
        })
    }
}

/// `−Σ r log y + (1 − r) log(1 − y)` over clamped probabilities.
pub fn bce_node(tape: &mut Tape, probs: NodeId, labels: &[f64]) -> Result<NodeId> {
    let (rows, cols) = tape.value(probs).dims();
    if rows * cols != labels.len() {
        return Err(Error::Shape {
            op: "bce_loss",
            left: vec![rows, cols],
            right: vec![labels.len()],
        });
    }
    let y = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let r = tape.constant(Tensor::matrix(rows, cols, labels.to_vec())?)?;
    let not_r = tape.constant(Tensor::matrix(rows, cols, labels.iter().map(|v| 1.0 - v).collect())?)?;
    let log_y = tape.ln(y)?;
    let one_minus_y = tape.affine(y, -1.0, 1.0)?;
    let log_not_y = tape.ln(one_minus_y)?;
    let pos = tape.mul(r, log_y)?;
    let neg = tape.mul(not_r, log_not_y)?;
    let both = tape.add(pos, neg)?;
    let total = tape.sum(both)?;
    tape.scale(total, -1.0)
}

/// Sets the biases after each hidden sigmoid layer so that pre-activations
/// start at zero when the previous layer outputs 0.5. Without this the
/// non-negative weights saturate the stack at initialization.
fn center_ncd_biases(p: &mut Params) {
    for (w, b) in [("ncd.w2", "ncd.b2"), ("ncd.w3", "ncd.b3")] {
        let weights = &p[w];
        let (rows, cols) = weights.dims();
        let mut bias = Tensor::zeros(1, cols);
        for j in 0..cols {
            bias.data_mut()[j] = -0.5 * (0..rows).map(|i| weights.get(i, j)).sum::<f64>();
        }
        p.insert(b.to_string(), bias);
    }
}

/// Clips NCD prediction-layer weights to be non-negative; other models
/// are unaffected. Biases are never touched.
pub fn project_nonneg(kind: ModelKind, params: &mut Params) {
    if kind != ModelKind::Ncd {
        return;
    }
    for name in NCD_LAYER_WEIGHTS {
        if let Some(w) = params.get_mut(name) {
            w.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
}
