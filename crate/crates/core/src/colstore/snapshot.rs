use super::{AdjacencyIndex, ColstoreError, EdgeType};
use crate::relgraph::{NodeId, TemporalGraph};

/// The graph restricted to nodes with timestamp `<= t`.
#[derive(Debug, Clone, Copy)]
pub struct SnapshotView<'a> {
    graph: &'a TemporalGraph,
    t: i64,
}

pub fn snapshot(graph: &TemporalGraph, t: i64) -> SnapshotView<'_> {
    SnapshotView { graph, t }
}

impl<'a> SnapshotView<'a> {
    pub fn cutoff(&self) -> i64 {
        self.t
    }

    pub fn graph(&self) -> &'a TemporalGraph {
        self.graph
    }

    pub fn contains(&self, node: NodeId) -> bool {
        (node.table as usize) < self.graph.tables().len()
            && (node.row as usize) < self.graph.table(node.table as usize).row_count()
            && self.graph.node_time(node) <= self.t
    }

    /// Visible rows of one table in ascending row order.
    pub fn visible_rows(&self, table: usize) -> Vec<u32> {
        let times = self.graph.table(table).times();
        (0..times.len() as u32)
            .filter(|&r| times[r as usize] <= self.t)
            .collect()
    }

    pub fn visible_count(&self, table: usize) -> usize {
        self.graph.table(table).times().iter().filter(|&&x| x <= self.t).count()
    }

    pub fn node_count(&self) -> usize {
        (0..self.graph.tables().len()).map(|i| self.visible_count(i)).sum()
    }

    /// All visible nodes in global id order.
    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.graph.tables().len()).flat_map(move |ti| {
            self.visible_rows(ti)
                .into_iter()
                .map(move |r| NodeId::new(ti, r as usize))
        })
    }

    /// Neighbor retrieval through the view: the `k` most recent visible neighbors.
    pub fn neighbors(
        &self,
        index: &AdjacencyIndex,
        node: NodeId,
        et: EdgeType,
        k: usize,
    ) -> Result<Vec<NodeId>, ColstoreError> {
        if !self.contains(node) {
            return Ok(Vec::new());
        }
        index.neighbors_before(node, et, self.t, k)
    }
}
