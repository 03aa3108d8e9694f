use serde::{Deserialize, Serialize};

use super::EmbeddingTable;
use crate::error::{Error, Result};
use crate::numerics::gemm;

/// The `k` most cosine-similar peers of every entity, most similar first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborIndex {
    pub k: usize,
    neighbors: Vec<Vec<usize>>,
}

impl NeighborIndex {
    pub fn neighbors(&self, entity: usize) -> &[usize] {
        &self.neighbors[entity]
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }
}

const BLOCK: usize = 256;

/// Ties are broken by ascending entity index.
pub fn topk_neighbors(table: &EmbeddingTable, k: usize) -> Result<NeighborIndex> {
    let n = table.len();
    if n < 2 {
        return Err(Error::contract(format!(
            "neighbor search needs at least 2 {}s, got {n}",
            table.kind
        )));
    }
    let x = table.matrix.l2_normalized_rows();
    let d = x.cols();
    let keep = k.min(n - 1);
    let mut neighbors = Vec::with_capacity(n);
    for start in (0..n).step_by(BLOCK) {
        let rows = BLOCK.min(n - start);
        let block = &x.data()[start * d..(start + rows) * d];
        let sims = gemm(rows, d, n, block, d, 1, x.data(), 1, d);
        for r in 0..rows {
            let i = start + r;
            let s = &sims[r * n..(r + 1) * n];
            let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
            order.truncate(keep);
            neighbors.push(order);
        }
    }
    Ok(NeighborIndex { k, neighbors })
}
