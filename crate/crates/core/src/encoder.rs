//! LightGCN-style propagation and uniform layer combination.

use crate::error::Result;
use crate::graph::BehaviorGraph;
use crate::tensor::{Tape, Var};

/// Layer outputs `0..=L` of one behavior; index 0 is the input.
#[derive(Clone, Debug)]
pub struct LayerStack {
    pub users: Vec<Var>,
    pub items: Vec<Var>,
}

impl LayerStack {
    pub fn num_layers(&self) -> usize {
        self.users.len() - 1
    }

    /// `1 / (L + 1)` for every layer.
    pub fn layer_weight(&self) -> f64 {
        1.0 / self.users.len() as f64
    }
}

/// Runs `layers` rounds of normalized neighbor aggregation. Users read item
/// rows from the previous layer and vice versa, so isolated nodes are zero
/// from layer 1 on.
pub fn propagate(
    tape: &mut Tape,
    graph: &BehaviorGraph,
    users0: Var,
    items0: Var,
    layers: usize,
) -> Result<LayerStack> {
    let mut users = vec![users0];
    let mut items = vec![items0];
    for l in 0..layers {
        let next_u = tape.spmm(graph.to_users(), items[l])?;
        let next_i = tape.spmm(graph.to_items(), users[l])?;
        users.push(next_u);
        items.push(next_i);
    }
    Ok(LayerStack { users, items })
}

fn weighted_sum(tape: &mut Tape, layers: &[Var], weight: f64) -> Result<Var> {
    let mut acc = layers[0];
    for &l in &layers[1..] {
        acc = tape.add(acc, l)?;
    }
    Ok(tape.scale(acc, weight))
}

/// Uniformly weighted sum of all layers.
pub fn combine(tape: &mut Tape, stack: &LayerStack) -> Result<(Var, Var)> {
    let w = stack.layer_weight();
    let users = weighted_sum(tape, &stack.users, w)?;
    let items = weighted_sum(tape, &stack.items, w)?;
    Ok((users, items))
}
