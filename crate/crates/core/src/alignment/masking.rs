use rand::Rng;

use super::AlignmentConfig;
use crate::error::{Error, Result};

/// Frequency-dependent mask ratio, growing with the log of the count.
pub fn mask_ratio(freq: usize, freq_max: usize, dim: usize, cfg: &AlignmentConfig) -> Result<f64> {
    if freq > freq_max {
        return Err(Error::contract(format!("frequency {freq} exceeds maximum {freq_max}")));
    }
    if dim <= 1 {
        return Ok(0.0);
    }
    if freq_max == 0 {
        return Ok(cfg.r_min);
    }
    let t = (freq as f64).ln_1p() / (freq_max as f64).ln_1p();
    Ok(cfg.r_min + (cfg.r_max - cfg.r_min) * t)
}

fn masked_count(dim: usize, ratio: f64) -> usize {
    let count = (dim as f64 * ratio + 1e-12).floor() as usize;
    count.min(dim.saturating_sub(1))
}

/// 0/1 multipliers with `floor(dim·ratio)` zeros at uniformly chosen
/// positions, always leaving one coordinate.
pub fn mask_pattern(dim: usize, ratio: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut pattern = vec![1.0; dim];
    let count = masked_count(dim, ratio);
    if count > 0 {
        for i in rand::seq::index::sample(rng, dim, count) {
            pattern[i] = 0.0;
        }
    }
    pattern
}

pub fn mask_embedding(c: &[f64], ratio: f64, rng: &mut impl Rng) -> Vec<f64> {
    mask_pattern(c.len(), ratio, rng)
        .iter()
        .zip(c)
        .map(|(m, v)| m * v)
        .collect()
}
