//! Leakage-safe temporal subgraph sampling around an entity at an anchor time.

use std::collections::{HashMap, HashSet};

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colstore::{ColstoreError, EdgeType, NeighborAccess};
use crate::relgraph::NodeId;
use crate::time::NEG_INF;
use crate::util::{hash_words, mix64, rng_for, unit_f64};

/// Relative time reported for dimension rows, which carry no timestamp.
pub const DELTA_INF: i64 = i64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplePolicy {
    /// The `k` most recent eligible neighbors, ties by ascending row.
    #[default]
    MostRecent,
    /// `k` eligible neighbors drawn uniformly with a seeded generator.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    /// Per-hop neighbor caps; the length is the hop depth.
    pub fanouts: Vec<usize>,
    pub policy: SamplePolicy,
    pub seed: u64,
    /// Fraction of foreign-key links hidden from the sampler, chosen by a seeded hash
    /// of (link, foreign-key row).
    pub edge_drop: f64,
}

impl SampleOptions {
    pub fn new(fanouts: &[usize]) -> SampleOptions {
        SampleOptions {
            fanouts: fanouts.to_vec(),
            policy: SamplePolicy::MostRecent,
            seed: 0,
            edge_drop: 0.0,
        }
    }

    pub fn depth(&self) -> usize {
        self.fanouts.len()
    }

    /// Whether the link `link` of foreign-key row `fk_row` is dropped.
    pub fn is_dropped(&self, link: usize, fk_row: u32) -> bool {
        self.edge_drop > 0.0 && unit_f64(hash_words(&[self.seed, 0xED6E, link as u64, fk_row as u64])) < self.edge_drop
    }
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions::new(&[32, 32])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampledEdge {
    /// Local id on the foreign-key side.
    pub src: u32,
    /// Local id on the primary-key side.
    pub dst: u32,
    /// Forward (foreign key to primary key) edge type.
    pub edge_type: EdgeType,
    /// Larger hop index of the two endpoints.
    pub hop: u8,
}

/// An entity-centred neighborhood. Local id 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledSubgraph {
    pub anchor: i64,
    pub nodes: Vec<NodeId>,
    pub hops: Vec<u8>,
    /// `anchor - timestamp`, or [`DELTA_INF`] for dimension rows.
    pub delta: Vec<i64>,
    pub edges: Vec<SampledEdge>,
}

impl SampledSubgraph {
    pub fn root(&self) -> NodeId {
        self.nodes[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Local ids of the nodes of one table, ascending.
    pub fn table_nodes(&self, table: u32) -> Vec<u32> {
        (0..self.nodes.len() as u32)
            .filter(|&i| self.nodes[i as usize].table == table)
            .collect()
    }

    pub fn depth(&self) -> u8 {
        self.hops.iter().copied().max().unwrap_or(0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("subgraph serializes")
    }
}

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("unknown root node {0:?}")]
    UnknownRoot(NodeId),
    #[error("root {root:?} has timestamp {time}, after the anchor {anchor}")]
    RootAfterAnchor { root: NodeId, time: i64, anchor: i64 },
    #[error("anchor time must be finite")]
    InfiniteAnchor,
    #[error(transparent)]
    Store(#[from] ColstoreError),
    #[error("batch item {index}: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<SampleError>,
    },
}

fn select<A: NeighborAccess + ?Sized>(
    access: &A,
    node: NodeId,
    et: EdgeType,
    anchor: i64,
    k: usize,
    opts: &SampleOptions,
) -> Result<Vec<NodeId>, ColstoreError> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let link = et.link();
    let eligible = access
        .index()
        .recent_before(node, et, anchor)?
        .map(|(n, _)| n)
        .filter(|n| {
            let fk_row = if et.is_reverse() { n.row } else { node.row };
            !opts.is_dropped(link, fk_row)
        });
    match opts.policy {
        SamplePolicy::MostRecent => Ok(eligible.take(k).collect()),
        SamplePolicy::Uniform => {
            let all: Vec<NodeId> = eligible.collect();
            if all.len() <= k {
                return Ok(all);
            }
            let mut rng = rng_for(&[
                opts.seed,
                anchor as u64,
                node.table as u64,
                node.row as u64,
                et.0 as u64,
            ]);
            let mut picked = sample_indices(&mut rng, all.len(), k).into_vec();
            picked.sort_unstable();
            Ok(picked.into_iter().map(|i| all[i]).collect())
        }
    }
}

/// Samples the neighborhood of `root` visible at `anchor`.
///
/// A node is included when some path from the root reaches it with the i-th step among
/// the `fanouts[i]` selected neighbors of its predecessor; the recorded hop is the
/// shortest such path. Edges are every non-dropped foreign-key link between included
/// nodes.
pub fn sample_subgraph<A: NeighborAccess + ?Sized>(
    access: &A,
    root: NodeId,
    anchor: i64,
    opts: &SampleOptions,
) -> Result<SampledSubgraph, SampleError> {
    let graph = access.graph();
    let index = access.index();
    if anchor == NEG_INF || anchor == i64::MAX {
        return Err(SampleError::InfiniteAnchor);
    }
    if root.table as usize >= graph.tables().len() || root.row as usize >= graph.table(root.table as usize).row_count()
    {
        return Err(SampleError::UnknownRoot(root));
    }
    let root_time = graph.node_time(root);
    if root_time > anchor {
        return Err(SampleError::RootAfterAnchor {
            root,
            time: root_time,
            anchor,
        });
    }
    let mut local: HashMap<NodeId, u32> = HashMap::new();
    let mut nodes = vec![root];
    let mut hops = vec![0u8];
    local.insert(root, 0);
    let mut states: HashSet<(NodeId, usize)> = HashSet::new();
    states.insert((root, 0));
    let mut frontier = vec![root];
    for (h, &k) in opts.fanouts.iter().enumerate() {
        let mut next = Vec::new();
        for &u in &frontier {
            for et in index.outgoing(u.table) {
                for v in select(access, u, et, anchor, k, opts)? {
                    if let std::collections::hash_map::Entry::Vacant(e) = local.entry(v) {
                        e.insert(nodes.len() as u32);
                        nodes.push(v);
                        hops.push((h + 1) as u8);
                    }
                    if states.insert((v, h + 1)) {
                        next.push(v);
                    }
                }
            }
        }
        frontier = next;
    }

    let mut edges = Vec::new();
    for (i, &u) in nodes.iter().enumerate() {
        for et in index.outgoing(u.table).filter(|e| !e.is_reverse()) {
            if opts.is_dropped(et.link(), u.row) {
                continue;
            }
            let csr = index.csr(et);
            let (lo, hi) = csr.range(u.row as usize);
            let to = index.info(et)?.to_table;
            for &row in &csr.neighbors()[lo..hi] {
                if let Some(&j) = local.get(&NodeId { table: to, row }) {
                    edges.push(SampledEdge {
                        src: i as u32,
                        dst: j,
                        edge_type: et,
                        hop: hops[i].max(hops[j as usize]),
                    });
                }
            }
        }
    }

    let delta = nodes
        .iter()
        .map(|&n| {
            let t = graph.node_time(n);
            if t == NEG_INF {
                DELTA_INF
            } else {
                anchor - t
            }
        })
        .collect();
    for &n in &nodes {
        access.note_input(n);
    }
    Ok(SampledSubgraph {
        anchor,
        nodes,
        hops,
        delta,
        edges,
    })
}

/// Samples many (root, anchor) pairs; identical to calling [`sample_subgraph`] per pair.
pub fn sample_batch<A: NeighborAccess + ?Sized>(
    access: &A,
    items: &[(NodeId, i64)],
    opts: &SampleOptions,
) -> Result<Vec<SampledSubgraph>, SampleError> {
    items
        .iter()
        .enumerate()
        .map(|(index, &(root, anchor))| {
            sample_subgraph(access, root, anchor, opts).map_err(|e| SampleError::Batch {
                index,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Stable identifier of a sampling configuration, used in report fingerprints.
pub fn options_key(opts: &SampleOptions) -> u64 {
    let mut words: Vec<u64> = opts.fanouts.iter().map(|&f| f as u64).collect();
    words.push(opts.policy as u64);
    words.push(opts.seed);
    words.push(opts.edge_drop.to_bits());
    mix64(hash_words(&words))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colstore::{Column, Store};
    use crate::relgraph::{ColumnMeta, LinkMeta, Schema, SemanticType, TableMeta, TemporalGraph};

    fn id(n: &str) -> ColumnMeta {
        ColumnMeta {
            name: n.into(),
            stype: SemanticType::Identifier,
        }
    }

    /// users(2) <- orders(3 for u0, 1 for u1) -> items(2): 8 nodes.
    pub(crate) fn toy() -> Store {
        let schema = Schema {
            tables: vec![
                TableMeta {
                    name: "users".into(),
                    columns: vec![id("user_id")],
                    primary_key: Some("user_id".into()),
                    time_column: None,
                    derived_columns: vec![],
                },
                TableMeta {
                    name: "items".into(),
                    columns: vec![id("item_id")],
                    primary_key: Some("item_id".into()),
                    time_column: None,
                    derived_columns: vec![],
                },
                TableMeta {
                    name: "orders".into(),
                    columns: vec![
                        id("user_id"),
                        id("item_id"),
                        ColumnMeta {
                            name: "t".into(),
                            stype: SemanticType::Timestamp,
                        },
                    ],
                    primary_key: None,
                    time_column: Some("t".into()),
                    derived_columns: vec![],
                },
            ],
            links: vec![
                LinkMeta {
                    src_table: "orders".into(),
                    fkey_column: "user_id".into(),
                    dst_table: "users".into(),
                },
                LinkMeta {
                    src_table: "orders".into(),
                    fkey_column: "item_id".into(),
                    dst_table: "items".into(),
                },
            ],
        };
        let g = TemporalGraph::from_columns(
            schema,
            vec![
                vec![Column::from_strings(
                    "user_id",
                    SemanticType::Identifier,
                    &s(&["u0", "u1"]),
                )],
                vec![Column::from_strings(
                    "item_id",
                    SemanticType::Identifier,
                    &s(&["i0", "i1"]),
                )],
                vec![
                    Column::from_strings("user_id", SemanticType::Identifier, &s(&["u0", "u0", "u0", "u1"])),
                    Column::from_strings("item_id", SemanticType::Identifier, &s(&["i0", "i1", "i0", "i1"])),
                    Column::from_times("t", &[Some(1), Some(5), Some(9), Some(2)]),
                ],
            ],
        )
        .unwrap();
        Store::build(g)
    }

    fn s(v: &[&'static str]) -> Vec<Option<&'static str>> {
        v.iter().map(|x| Some(*x)).collect()
    }

    #[test]
    fn empty_fanouts_is_root_only() {
        let st = toy();
        let s = sample_subgraph(&st, NodeId::new(0, 0), 10, &SampleOptions::new(&[])).unwrap();
        assert_eq!(s.nodes, vec![NodeId::new(0, 0)]);
        assert!(s.edges.is_empty());
        assert_eq!(s.delta, vec![DELTA_INF]);
    }

    #[test]
    fn two_hops_reach_items() {
        let st = toy();
        let s = sample_subgraph(&st, NodeId::new(0, 0), 10, &SampleOptions::new(&[32, 32])).unwrap();
        let mut got = s.nodes.clone();
        got.sort();
        assert_eq!(
            got,
            vec![
                NodeId::new(0, 0),
                NodeId::new(1, 0),
                NodeId::new(1, 1),
                NodeId::new(2, 0),
                NodeId::new(2, 1),
                NodeId::new(2, 2)
            ]
        );
        assert_eq!(s.edges.len(), 6);
        assert!(s.edges.iter().all(|e| !e.edge_type.is_reverse()));
    }

    #[test]
    fn anchor_hides_future_orders() {
        let st = toy();
        let s = sample_subgraph(&st, NodeId::new(0, 0), 6, &SampleOptions::new(&[1])).unwrap();
        assert_eq!(s.nodes, vec![NodeId::new(0, 0), NodeId::new(2, 1)]);
        assert_eq!(s.delta[1], 1);
        assert_eq!(s.hops, vec![0, 1]);
    }

    #[test]
    fn full_edge_drop_leaves_root() {
        let st = toy();
        let mut o = SampleOptions::new(&[8, 8]);
        o.edge_drop = 1.0;
        let s = sample_subgraph(&st, NodeId::new(0, 0), 10, &o).unwrap();
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn errors() {
        let st = toy();
        let o = SampleOptions::default();
        assert!(matches!(
            sample_subgraph(&st, NodeId::new(5, 0), 1, &o),
            Err(SampleError::UnknownRoot(_))
        ));
        assert!(matches!(
            sample_subgraph(&st, NodeId::new(2, 2), 3, &o),
            Err(SampleError::RootAfterAnchor { .. })
        ));
        let e = sample_batch(&st, &[(NodeId::new(0, 0), 3), (NodeId::new(2, 2), 3)], &o).unwrap_err();
        assert!(matches!(e, SampleError::Batch { index: 1, .. }));
        assert!(sample_batch(&st, &[], &o).unwrap().is_empty());
    }

    #[test]
    fn uniform_policy_is_seeded() {
        let st = toy();
        let mut o = SampleOptions::new(&[2]);
        o.policy = SamplePolicy::Uniform;
        o.seed = 4;
        let a = sample_subgraph(&st, NodeId::new(0, 0), 10, &o).unwrap();
        let b = sample_subgraph(&st, NodeId::new(0, 0), 10, &o).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
    }
}
