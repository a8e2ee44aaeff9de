//! Per-behavior user-item bipartite graphs with symmetric normalization.

use std::sync::Arc;

use crate::dataset::InteractionDataset;
use crate::error::{Error, Result};
use crate::tensor::{SparseMatrix, SparseOperator};

/// Bipartite interaction graph of one behavior.
///
/// Edges are stored in both orientations, each row sorted by neighbor
/// index, and carry `1 / (sqrt(|N_u|) * sqrt(|N_i|))`. Nodes without edges
/// are allowed and simply have no stored entries.
#[derive(Clone, Debug)]
pub struct BehaviorGraph {
    num_users: usize,
    num_items: usize,
    deg_u: Vec<usize>,
    deg_i: Vec<usize>,
    /// `M x N`: aggregates item rows into users.
    to_users: Arc<SparseOperator>,
    /// `N x M`: aggregates user rows into items.
    to_items: Arc<SparseOperator>,
}

impl BehaviorGraph {
    /// Builds from distinct (user, item) pairs.
    pub fn from_pairs(num_users: usize, num_items: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut deg_u = vec![0usize; num_users];
        let mut deg_i = vec![0usize; num_items];
        for &(u, i) in pairs {
            if u >= num_users || i >= num_items {
                return Err(Error::Config(format!(
                    "edge ({u}, {i}) outside {num_users} users x {num_items} items"
                )));
            }
            deg_u[u] += 1;
            deg_i[i] += 1;
        }
        let mut sorted = pairs.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != pairs.len() {
            return Err(Error::Config("duplicate edge in behavior graph".into()));
        }
        let norm = |u: usize, i: usize| 1.0 / ((deg_u[u] as f64).sqrt() * (deg_i[i] as f64).sqrt());
        let ui: Vec<_> = sorted.iter().map(|&(u, i)| (u, i, norm(u, i))).collect();
        let mut by_item = sorted.clone();
        by_item.sort_unstable_by_key(|&(u, i)| (i, u));
        let iu: Vec<_> = by_item.iter().map(|&(u, i)| (i, u, norm(u, i))).collect();
        Ok(BehaviorGraph {
            num_users,
            num_items,
            to_users: Arc::new(SparseOperator::new(SparseMatrix::from_triplets(
                num_users, num_items, &ui,
            ))),
            to_items: Arc::new(SparseOperator::new(SparseMatrix::from_triplets(
                num_items, num_users, &iu,
            ))),
            deg_u,
            deg_i,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_edges(&self) -> usize {
        self.to_users.matrix().nnz()
    }

    pub fn user_degree(&self, u: usize) -> usize {
        self.deg_u[u]
    }

    pub fn item_degree(&self, i: usize) -> usize {
        self.deg_i[i]
    }

    pub fn user_degrees(&self) -> &[usize] {
        &self.deg_u
    }

    pub fn item_degrees(&self) -> &[usize] {
        &self.deg_i
    }

    /// Items of user `u` with the edge normalization.
    pub fn user_neighbors(&self, u: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.to_users.matrix().row(u)
    }

    pub fn item_neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.to_items.matrix().row(i)
    }

    /// Normalized `M x N` operator (item features -> users).
    pub fn to_users(&self) -> &Arc<SparseOperator> {
        &self.to_users
    }

    /// Normalized `N x M` operator (user features -> items).
    pub fn to_items(&self) -> &Arc<SparseOperator> {
        &self.to_items
    }
}

/// Graph of behavior `b` over the training split.
pub fn build_graph(ds: &InteractionDataset, b: usize) -> Result<BehaviorGraph> {
    if b >= ds.num_behaviors() {
        return Err(Error::Config(format!(
            "behavior index {b} out of range (chain has {})",
            ds.num_behaviors()
        )));
    }
    BehaviorGraph::from_pairs(ds.num_users(), ds.num_items(), &ds.train_pairs(b))
}

/// Graphs for every behavior in chain order.
pub fn build_graphs(ds: &InteractionDataset) -> Result<Vec<BehaviorGraph>> {
    (0..ds.num_behaviors()).map(|b| build_graph(ds, b)).collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn degrees_by_direct_count() {
        let g = BehaviorGraph::from_pairs(2, 2, &[(0, 0), (0, 1), (1, 1)]).unwrap();
        assert_eq!(g.user_degrees(), &[2, 1]);
        assert_eq!(g.item_degrees(), &[1, 2]);
        let n: Vec<_> = g.user_neighbors(0).collect();
        assert_eq!(n[0].0, 0);
        assert!((n[0].1 - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!((n[1].1 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn empty_behavior_has_zero_degrees() {
        let g = BehaviorGraph::from_pairs(3, 2, &[]).unwrap();
        assert!(g.user_degrees().iter().all(|&d| d == 0));
        assert!(g.item_degrees().iter().all(|&d| d == 0));
        assert_eq!(g.num_edges(), 0);
    }

    #[test]
    fn duplicate_edges_are_rejected() {
        assert!(BehaviorGraph::from_pairs(1, 1, &[(0, 0), (0, 0)]).is_err());
    }

    proptest! {
        #[test]
        fn degree_sums_equal_edge_count(
            edges in prop::collection::btree_set((0usize..12, 0usize..9), 0..60)
        ) {
            let pairs: Vec<_> = edges.into_iter().collect();
            let g = BehaviorGraph::from_pairs(12, 9, &pairs).unwrap();
            prop_assert_eq!(g.user_degrees().iter().sum::<usize>(), pairs.len());
            prop_assert_eq!(g.item_degrees().iter().sum::<usize>(), pairs.len());
            for i in 0..9 {
                for (_, w) in g.item_neighbors(i) {
                    prop_assert!(w.is_finite() && w > 0.0);
                }
            }
        }
    }
}
