//! Meta-knowledge extraction and meta-network generated per-node block
//! transforms between consecutive behaviors.

use crate::disentangle::FactorizedEmbeddings;
use crate::error::Result;
use crate::graph::BehaviorGraph;
use crate::tensor::{Tape, Var};

/// Per-block meta-knowledge rows, `2d/K` wide.
#[derive(Clone, Debug)]
pub struct MetaKnowledge {
    pub users: Vec<Var>,
    pub items: Vec<Var>,
}

/// Two-layer network `relu(T W1 + b1) W2 + b2` whose output row is a
/// flattened row-major `(d/K) x (d/K)` matrix.
#[derive(Clone, Copy, Debug)]
pub struct MetaNetwork {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Own block embedding concatenated with the normalized first-order
/// neighbor aggregate of `neighbors`' matching block. Neighborhoods come
/// from `graph`.
pub fn meta_knowledge(
    tape: &mut Tape,
    graph: &BehaviorGraph,
    own_users: &FactorizedEmbeddings,
    own_items: &FactorizedEmbeddings,
    neighbor_users: &FactorizedEmbeddings,
    neighbor_items: &FactorizedEmbeddings,
) -> Result<MetaKnowledge> {
    let factors = own_users.num_factors();
    let mut users = Vec::with_capacity(factors);
    let mut items = Vec::with_capacity(factors);
    for k in 0..factors {
        let agg_u = tape.spmm(graph.to_users(), neighbor_items.blocks[k])?;
        users.push(tape.concat(&[own_users.blocks[k], agg_u])?);
        let agg_i = tape.spmm(graph.to_items(), neighbor_users.blocks[k])?;
        items.push(tape.concat(&[own_items.blocks[k], agg_i])?);
    }
    Ok(MetaKnowledge { users, items })
}

/// The post-convolution alternative: neighbors are read from the current
/// behavior's own output.
pub fn post_conv_meta_knowledge(
    tape: &mut Tape,
    graph: &BehaviorGraph,
    users: &FactorizedEmbeddings,
    items: &FactorizedEmbeddings,
) -> Result<MetaKnowledge> {
    meta_knowledge(tape, graph, users, items, users, items)
}

/// Flattened transform matrices, one row per meta-knowledge row.
pub fn generate_transform(tape: &mut Tape, knowledge: Var, net: &MetaNetwork) -> Result<Var> {
    let h = tape.matmul(knowledge, net.w1)?;
    let h = tape.add_row(h, net.b1)?;
    let h = tape.relu(h);
    let out = tape.matmul(h, net.w2)?;
    tape.add_row(out, net.b2)
}

/// Row `n` of the result is `M_n * e_n`.
pub fn personalized_transform(tape: &mut Tape, block: Var, matrices: Var) -> Result<Var> {
    tape.row_matvec(matrices, block)
}

/// Every row multiplied by the same `(d/K) x (d/K)` matrix `S`: `e_n -> S e_n`.
pub fn shared_transform(tape: &mut Tape, block: Var, matrix: Var) -> Result<Var> {
    let st = tape.transpose(matrix);
    tape.matmul(block, st)
}
