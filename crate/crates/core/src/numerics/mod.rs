//! Dense tensors, a reverse-mode tape, Adam, finite-difference checks and
//! the checkpoint format.

mod checkpoint;
mod gradcheck;
mod optim;
mod tape;
mod tensor;

use std::collections::BTreeMap;

pub use checkpoint::{Checkpoint, TensorRecord, CHECKPOINT_VERSION};
pub use gradcheck::{gradient_check, GradCheckEntry, GradCheckOptions, GradCheckReport};
pub use optim::{AdamConfig, OptimizerState};
pub use tape::{Gradients, NodeId, Tape};
pub(crate) use tensor::gemm;
pub use tensor::{Tensor, NORM_EPS};

use crate::error::Result;

/// Named parameter blocks. Ordered so that iteration, serialization and
/// gradient reduction are deterministic.
pub type Params = BTreeMap<String, Tensor>;

/// Gradients keyed by parameter name.
pub type Grads = BTreeMap<String, Tensor>;

/// Tape node for every parameter block, keyed by name.
pub type ParamNodes = BTreeMap<String, NodeId>;

/// Records every parameter as a leaf, builds a scalar objective with
/// `build`, and returns its value with gradients for each block.
pub fn value_and_grad<F>(params: &Params, build: F) -> Result<(f64, Grads)>
where
    F: FnOnce(&mut Tape, &ParamNodes) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let mut nodes = ParamNodes::new();
    for (name, value) in params {
        nodes.insert(name.clone(), tape.leaf(value.clone())?);
    }
    let out = build(&mut tape, &nodes)?;
    let value = tape.value(out).item()?;
    let mut grads = tape.backward(out)?;
    let mut by_name = Grads::new();
    for (name, id) in &nodes {
        let g = grads.take(*id).unwrap_or_else(|| Tensor::zeros_like(&params[name]));
        by_name.insert(name.clone(), g);
    }
    Ok((value, by_name))
}

/// Evaluates a scalar objective with every parameter recorded as a constant.
pub fn value_only<F>(params: &Params, build: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, &ParamNodes) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let mut nodes = ParamNodes::new();
    for (name, value) in params {
        nodes.insert(name.clone(), tape.constant(value.clone())?);
    }
    let out = build(&mut tape, &nodes)?;
    tape.value(out).item()
}
