//! Single-interaction interaction functions on plain values.
//!
//! These mirror the batched tape forms in the parent module and serve as
//! their reference in tests.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Probability of a correct answer, strictly inside (0, 1) for finite
/// inputs up to floating-point saturation.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Prediction(pub f64);

impl Prediction {
    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `σ(a · (θ − b))`.
pub fn predict_irt(theta: f64, a: f64, b: f64) -> Prediction {
    Prediction(sigmoid(a * (theta - b)))
}

/// `σ(a · θ − b)`.
pub fn predict_mirt(theta: &[f64], a: &[f64], b: f64) -> Result<Prediction> {
    if theta.len() != a.len() {
        return Err(Error::Shape {
            op: "predict_mirt",
            left: vec![theta.len()],
            right: vec![a.len()],
        });
    }
    let dot: f64 = theta.iter().zip(a).map(|(t, a)| t * a).sum();
    Ok(Prediction(sigmoid(dot - b)))
}

/// Linear-mixture DINA: `g (1 − η) + (1 − s) η` with `η = Π σ(m_k)` over
/// the required concepts.
pub fn predict_dina(
    mastery_logits: &[f64],
    slip_logit: f64,
    guess_logit: f64,
    required: &[usize],
) -> Result<Prediction> {
    if required.is_empty() {
        return Err(Error::contract("DINA needs at least one required concept"));
    }
    let mut eta = 1.0;
    for &k in required {
        let m = mastery_logits
            .get(k)
            .ok_or_else(|| Error::contract(format!("concept {k} out of range")))?;
        eta *= sigmoid(*m);
    }
    let s = sigmoid(slip_logit);
    let g = sigmoid(guess_logit);
    Ok(Prediction(g * (1.0 - eta) + (1.0 - s) * eta))
}

/// NCD prediction layers, row-major with inputs along rows
/// (`w1: K × h1`, `w2: h1 × h2`, `w3: h2 × 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct NcdLayers {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

fn dense_sigmoid(x: &[f64], w: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let (rows, cols) = w.dims();
    if rows != x.len() || b.len() != cols {
        return Err(Error::Shape {
            op: "predict_ncd",
            left: vec![x.len()],
            right: vec![rows, cols],
        });
    }
    Ok((0..cols)
        .map(|j| {
            let z: f64 = (0..rows).map(|i| x[i] * w.get(i, j)).sum::<f64>() + b.data()[j];
            sigmoid(z)
        })
        .collect())
}

pub fn predict_ncd(
    student_row: &[f64],
    difficulty_row: &[f64],
    disc_logit: f64,
    q_row: &[f64],
    layers: &NcdLayers,
) -> Result<Prediction> {
    let k = student_row.len();
    if difficulty_row.len() != k || q_row.len() != k {
        return Err(Error::Shape {
            op: "predict_ncd",
            left: vec![k],
            right: vec![difficulty_row.len(), q_row.len()],
        });
    }
    let disc = sigmoid(disc_logit);
    let x: Vec<f64> = (0..k)
        .map(|i| q_row[i] * (sigmoid(student_row[i]) - sigmoid(difficulty_row[i])) * disc)
        .collect();
    let h1 = dense_sigmoid(&x, &layers.w1, &layers.b1)?;
    let h2 = dense_sigmoid(&h1, &layers.w2, &layers.b2)?;
    let out = dense_sigmoid(&h2, &layers.w3, &layers.b3)?;
    Ok(Prediction(out[0]))
}

pub const PROB_CLAMP: f64 = 1e-7;

/// Summed binary cross-entropy over clamped predictions.
pub fn bce_loss(predictions: &[Prediction], labels: &[f64]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape {
            op: "bce_loss",
            left: vec![predictions.len()],
            right: vec![labels.len()],
        });
    }
    Ok(predictions
        .iter()
        .zip(labels)
        .map(|(p, &r)| {
            let y = p.0.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(r * y.ln() + (1.0 - r) * (1.0 - y).ln())
        })
        .sum())
}
