use crate::error::Result;
use crate::numerics::{Grads, Params};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Probe at most this many evenly strided coordinates per block.
    pub max_coords_per_block: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            max_coords_per_block: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub block: String,
    pub coords_checked: usize,
    /// Max over probed coordinates of `|g_a − g_fd| / max(1, |g_fd|)`.
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

/// Compares `analytic` against central differences of `f` at `params`.
///
/// Blocks absent from `analytic` are compared against a zero gradient.
pub fn gradient_check<F>(f: F, params: &Params, analytic: &Grads, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Params) -> Result<f64>,
{
    let mut work = params.clone();
    let mut report = GradCheckReport::default();
    for (name, value) in params {
        let n = value.len();
        let coords: Vec<usize> = match opts.max_coords_per_block {
            Some(cap) if cap < n => {
                let stride = n as f64 / cap as f64;
                (0..cap).map(|i| (i as f64 * stride) as usize).collect()
            }
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for &i in &coords {
            let orig = value.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + opts.step;
            let up = f(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - opts.step;
            let down = f(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * opts.step);
            let ga = analytic.get(name).map_or(0.0, |g| g.data()[i]);
            let rel = (ga - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(rel);
        }
        report.entries.push(GradCheckEntry {
            block: name.clone(),
            coords_checked: coords.len(),
            max_rel_error: worst,
            passed: worst <= opts.tol,
        });
    }
    Ok(report)
}
