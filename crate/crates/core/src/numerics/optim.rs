use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Grads, Params, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    first: Tensor,
    second: Tensor,
}

/// Bias-corrected adaptive-moment optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter that has a gradient entry.
    /// Parameters without an entry are left untouched.
    pub fn step(&mut self, params: &mut Params, grads: &Grads) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown parameter {name}")))?;
            if !p.same_shape(g) {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                first: Tensor::zeros_like(p),
                second: Tensor::zeros_like(p),
            });
            let pd = p.data_mut();
            let md = m.first.data_mut();
            let vd = m.second.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: f64) -> Params {
        let mut p = Params::new();
        p.insert(name.to_string(), Tensor::scalar(v));
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = single("w", 1.5);
        let mut opt = OptimizerState::new(AdamConfig::default());
        let grads = single("w", 0.0);
        for _ in 0..5 {
            opt.step(&mut params, &grads).unwrap();
        }
        assert_eq!(params["w"].item().unwrap(), 1.5);
        assert_eq!(opt.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = single("w", 0.0);
        let mut opt = OptimizerState::new(AdamConfig::default());
        opt.step(&mut params, &single("w", 1.0)).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = lr / (1 + eps)
        let want = -0.002 / (1.0 + 1e-8);
        assert!((params["w"].item().unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn identical_runs_are_identical() {
        let run = || {
            let mut params = single("w", 0.3);
            let mut opt = OptimizerState::new(AdamConfig::default());
            for k in 0..10 {
                opt.step(&mut params, &single("w", (k as f64).sin())).unwrap();
            }
            params["w"].item().unwrap().to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = single("w", 0.3);
        let mut grads = Params::new();
        grads.insert("w".into(), Tensor::vector(vec![1.0, 2.0]));
        let mut opt = OptimizerState::new(AdamConfig::default());
        assert!(matches!(opt.step(&mut params, &grads), Err(Error::Shape { .. })));
    }
}
