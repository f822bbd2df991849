use serde::{Deserialize, Serialize};

use super::{Buf, ColstoreError};
use crate::relgraph::{NodeId, TemporalGraph};

/// A directed edge type. Each link yields two: `2 * link` points from the foreign-key
/// row to the referenced primary-key row, `2 * link + 1` is the reverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EdgeType(pub u32);

impl EdgeType {
    pub fn new(link: usize, reverse: bool) -> EdgeType {
        EdgeType(link as u32 * 2 + reverse as u32)
    }

    pub fn link(self) -> usize {
        (self.0 / 2) as usize
    }

    pub fn is_reverse(self) -> bool {
        self.0 % 2 == 1
    }

    pub fn reversed(self) -> EdgeType {
        EdgeType(self.0 ^ 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeTypeInfo {
    pub from_table: u32,
    pub to_table: u32,
}

/// Compressed sparse rows over the source table. Each neighbor list is sorted by
/// ascending neighbor timestamp, ties by descending row, so that walking a list
/// backwards yields most-recent-first with ascending row among equal times.
#[derive(Debug, Clone)]
pub struct Csr {
    pub(crate) offsets: Buf<u64>,
    pub(crate) nbrs: Buf<u32>,
    pub(crate) times: Buf<i64>,
}

impl Csr {
    #[inline]
    pub fn range(&self, row: usize) -> (usize, usize) {
        (self.offsets[row] as usize, self.offsets[row + 1] as usize)
    }

    pub fn offsets(&self) -> &[u64] {
        &self.offsets
    }

    pub fn neighbors(&self) -> &[u32] {
        &self.nbrs
    }

    pub fn times(&self) -> &[i64] {
        &self.times
    }

    pub fn row_count(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn edge_count(&self) -> usize {
        self.nbrs.len()
    }
}

/// Time-indexed adjacency for every edge type of a graph.
#[derive(Debug, Clone)]
pub struct AdjacencyIndex {
    pub(crate) types: Vec<EdgeTypeInfo>,
    pub(crate) csr: Vec<Csr>,
    pub(crate) dangling: Vec<u64>,
}

fn build_csr(n_src: usize, pairs: &mut [(u32, u32)], dst_times: &[i64]) -> Csr {
    let mut counts = vec![0u64; n_src + 1];
    for &(s, _) in pairs.iter() {
        counts[s as usize + 1] += 1;
    }
    for i in 0..n_src {
        counts[i + 1] += counts[i];
    }
    pairs.sort_unstable_by(|a, b| {
        a.0.cmp(&b.0)
            .then(dst_times[a.1 as usize].cmp(&dst_times[b.1 as usize]))
            .then(b.1.cmp(&a.1))
    });
    let nbrs: Vec<u32> = pairs.iter().map(|p| p.1).collect();
    let times: Vec<i64> = nbrs.iter().map(|&d| dst_times[d as usize]).collect();
    Csr {
        offsets: Buf::Owned(counts),
        nbrs: Buf::Owned(nbrs),
        times: Buf::Owned(times),
    }
}

/// Builds both directions of every link. Dangling foreign keys are counted and skipped.
pub fn build_adjacency(graph: &TemporalGraph) -> AdjacencyIndex {
    let schema = graph.schema();
    let mut types = Vec::with_capacity(schema.links.len() * 2);
    let mut csr = Vec::with_capacity(schema.links.len() * 2);
    let mut dangling = Vec::with_capacity(schema.links.len());
    for link in &schema.links {
        let si = graph.table_index(&link.src_table).expect("validated link");
        let di = graph.table_index(&link.dst_table).expect("validated link");
        let src = graph.table(si);
        let dst = graph.table(di);
        let fk = src.column(&link.fkey_column).expect("validated link");
        // Resolve each dictionary entry once.
        let resolved: Vec<Option<u32>> = match fk.dictionary() {
            Some(dict) => dict.iter().map(|k| dst.row_of_key(k)).collect(),
            None => Vec::new(),
        };
        let mut pairs = Vec::with_capacity(src.row_count());
        let mut dangle = 0u64;
        for r in 0..src.row_count() {
            let Some(code) = fk.code_at(r) else { continue };
            match resolved.get(code as usize).copied().flatten() {
                Some(d) => pairs.push((r as u32, d)),
                None => dangle += 1,
            }
        }
        let mut fwd = pairs.clone();
        csr.push(build_csr(src.row_count(), &mut fwd, dst.times()));
        types.push(EdgeTypeInfo {
            from_table: si as u32,
            to_table: di as u32,
        });
        let mut rev: Vec<(u32, u32)> = pairs.into_iter().map(|(s, d)| (d, s)).collect();
        csr.push(build_csr(dst.row_count(), &mut rev, src.times()));
        types.push(EdgeTypeInfo {
            from_table: di as u32,
            to_table: si as u32,
        });
        dangling.push(dangle);
    }
    AdjacencyIndex { types, csr, dangling }
}

impl AdjacencyIndex {
    pub fn edge_types(&self) -> impl Iterator<Item = (EdgeType, EdgeTypeInfo)> + '_ {
        self.types
            .iter()
            .enumerate()
            .map(|(i, info)| (EdgeType(i as u32), *info))
    }

    pub fn edge_type_count(&self) -> usize {
        self.types.len()
    }

    pub fn info(&self, et: EdgeType) -> Result<EdgeTypeInfo, ColstoreError> {
        self.types
            .get(et.0 as usize)
            .copied()
            .ok_or(ColstoreError::UnknownEdgeType(et.0))
    }

    pub fn csr(&self, et: EdgeType) -> &Csr {
        &self.csr[et.0 as usize]
    }

    /// Edge types whose source table is `table`, in id order.
    pub fn outgoing(&self, table: u32) -> impl Iterator<Item = EdgeType> + '_ {
        self.types
            .iter()
            .enumerate()
            .filter(move |(_, i)| i.from_table == table)
            .map(|(i, _)| EdgeType(i as u32))
    }

    pub fn dangling(&self, link: usize) -> u64 {
        self.dangling[link]
    }

    pub fn forward_edge_count(&self, link: usize) -> u64 {
        self.csr[link * 2].edge_count() as u64
    }

    fn list(&self, node: NodeId, et: EdgeType) -> Result<(&Csr, usize, usize), ColstoreError> {
        let info = self.info(et)?;
        let csr = &self.csr[et.0 as usize];
        if info.from_table != node.table || node.row as usize >= csr.row_count() {
            return Err(ColstoreError::BadNode {
                table: node.table,
                row: node.row,
                edge_type: et.0,
            });
        }
        let (lo, hi) = csr.range(node.row as usize);
        Ok((csr, lo, hi))
    }

    /// Iterates neighbors with timestamp `<= t`, most recent first; equal timestamps
    /// come in ascending row order and timeless neighbors come last.
    pub fn recent_before(
        &self,
        node: NodeId,
        et: EdgeType,
        t: i64,
    ) -> Result<impl Iterator<Item = (NodeId, i64)> + '_, ColstoreError> {
        let (csr, lo, hi) = self.list(node, et)?;
        let ub = lo + csr.times[lo..hi].partition_point(|&x| x <= t);
        let to = self.types[et.0 as usize].to_table;
        Ok((lo..ub).rev().map(move |i| {
            (
                NodeId {
                    table: to,
                    row: csr.nbrs[i],
                },
                csr.times[i],
            )
        }))
    }

    /// The `k` most recent neighbors with timestamp `<= t`. O(log d + k).
    pub fn neighbors_before(&self, node: NodeId, et: EdgeType, t: i64, k: usize) -> Result<Vec<NodeId>, ColstoreError> {
        Ok(self.recent_before(node, et, t)?.take(k).map(|(n, _)| n).collect())
    }

    /// Neighbors with timestamp in `(lo, hi]`, ascending by time.
    pub fn neighbors_in_window(
        &self,
        node: NodeId,
        et: EdgeType,
        lo: i64,
        hi: i64,
    ) -> Result<impl Iterator<Item = (NodeId, i64)> + '_, ColstoreError> {
        let (csr, a, b) = self.list(node, et)?;
        let times = &csr.times[a..b];
        let start = a + times.partition_point(|&x| x <= lo);
        let end = a + times.partition_point(|&x| x <= hi);
        let to = self.types[et.0 as usize].to_table;
        Ok((start..end.max(start)).map(move |i| {
            (
                NodeId {
                    table: to,
                    row: csr.nbrs[i],
                },
                csr.times[i],
            )
        }))
    }

    /// Total neighbor count of a node under an edge type, ignoring time.
    pub fn degree(&self, node: NodeId, et: EdgeType) -> Result<usize, ColstoreError> {
        let (_, lo, hi) = self.list(node, et)?;
        Ok(hi - lo)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colstore::Column;
    use crate::relgraph::{ColumnMeta, LinkMeta, Schema, SemanticType, TableMeta};

    pub(crate) fn users_orders(fks: &[Option<&str>], times: &[i64]) -> TemporalGraph {
        let users = TableMeta {
            name: "users".into(),
            columns: vec![ColumnMeta {
                name: "user_id".into(),
                stype: SemanticType::Identifier,
            }],
            primary_key: Some("user_id".into()),
            time_column: None,
            derived_columns: vec![],
        };
        let orders = TableMeta {
            name: "orders".into(),
            columns: vec![
                ColumnMeta {
                    name: "user_id".into(),
                    stype: SemanticType::Identifier,
                },
                ColumnMeta {
                    name: "t".into(),
                    stype: SemanticType::Timestamp,
                },
            ],
            primary_key: None,
            time_column: Some("t".into()),
            derived_columns: vec![],
        };
        let schema = Schema {
            tables: vec![users, orders],
            links: vec![LinkMeta {
                src_table: "orders".into(),
                fkey_column: "user_id".into(),
                dst_table: "users".into(),
            }],
        };
        TemporalGraph::from_columns(
            schema,
            vec![
                vec![Column::from_strings(
                    "user_id",
                    SemanticType::Identifier,
                    &[Some("u1"), Some("u2")],
                )],
                vec![
                    Column::from_strings("user_id", SemanticType::Identifier, fks),
                    Column::from_times("t", &times.iter().map(|&t| Some(t)).collect::<Vec<_>>()),
                ],
            ],
        )
        .unwrap()
    }

    #[test]
    fn direct_inversion() {
        let g = users_orders(&[Some("u1"), Some("u1"), Some("u2")], &[1, 2, 3]);
        let idx = build_adjacency(&g);
        let rev = EdgeType::new(0, true);
        let u1 = idx.neighbors_before(NodeId::new(0, 0), rev, i64::MAX, 10).unwrap();
        assert_eq!(u1, vec![NodeId::new(1, 1), NodeId::new(1, 0)]);
        let u2 = idx.neighbors_before(NodeId::new(0, 1), rev, i64::MAX, 10).unwrap();
        assert_eq!(u2, vec![NodeId::new(1, 2)]);
        let fwd = EdgeType::new(0, false);
        assert_eq!(
            idx.neighbors_before(NodeId::new(1, 2), fwd, 0, 5).unwrap(),
            vec![NodeId::new(0, 1)]
        );
        assert_eq!(idx.forward_edge_count(0), 3);
    }

    #[test]
    fn dangling_counted() {
        let g = users_orders(&[Some("u1"), Some("zz"), None], &[1, 2, 3]);
        let idx = build_adjacency(&g);
        assert_eq!(idx.dangling(0), 1);
        assert_eq!(idx.forward_edge_count(0), 1);
        assert_eq!(idx.degree(NodeId::new(1, 1), EdgeType::new(0, false)).unwrap(), 0);
    }

    #[test]
    fn time_sorted_lists_and_queries() {
        let g = users_orders(&[Some("u1"), Some("u1"), Some("u1")], &[9, 1, 5]);
        let idx = build_adjacency(&g);
        let rev = EdgeType::new(0, true);
        let csr = idx.csr(rev);
        assert_eq!(csr.times(), &[1, 5, 9]);
        assert_eq!(csr.neighbors(), &[1, 2, 0]);
        let u = NodeId::new(0, 0);
        assert_eq!(
            idx.neighbors_before(u, rev, 6, 2).unwrap(),
            vec![NodeId::new(1, 2), NodeId::new(1, 1)]
        );
        assert!(idx.neighbors_before(u, rev, 6, 0).unwrap().is_empty());
        assert!(idx.neighbors_before(u, rev, 0, 3).unwrap().is_empty());
        let w: Vec<_> = idx.neighbors_in_window(u, rev, 1, 9).unwrap().map(|x| x.1).collect();
        assert_eq!(w, vec![5, 9]);
    }

    #[test]
    fn equal_times_ascending_rows() {
        let g = users_orders(&[Some("u1"), Some("u1"), Some("u1")], &[4, 4, 4]);
        let idx = build_adjacency(&g);
        let got = idx
            .neighbors_before(NodeId::new(0, 0), EdgeType::new(0, true), 4, 3)
            .unwrap();
        assert_eq!(got, vec![NodeId::new(1, 0), NodeId::new(1, 1), NodeId::new(1, 2)]);
    }

    #[test]
    fn unknown_edge_type_errors() {
        let g = users_orders(&[Some("u1")], &[1]);
        let idx = build_adjacency(&g);
        assert!(matches!(
            idx.neighbors_before(NodeId::new(0, 0), EdgeType(7), 0, 1),
            Err(ColstoreError::UnknownEdgeType(7))
        ));
        assert!(idx
            .neighbors_before(NodeId::new(1, 0), EdgeType::new(0, true), 0, 1)
            .is_err());
    }
}
