use std::sync::atomic::Ordering::Relaxed;
use std::sync::atomic::{AtomicI64, AtomicU64};

use super::{build_adjacency, AdjacencyIndex};
use crate::relgraph::{NodeId, TemporalGraph};
use crate::time::NEG_INF;

/// A built graph together with its adjacency index.
#[derive(Debug, Clone)]
pub struct Store {
    pub graph: TemporalGraph,
    pub index: AdjacencyIndex,
}

impl Store {
    pub fn new(graph: TemporalGraph, index: AdjacencyIndex) -> Store {
        Store { graph, index }
    }

    pub fn build(graph: TemporalGraph) -> Store {
        let index = build_adjacency(&graph);
        Store { graph, index }
    }
}

/// Read access to a store. Sampling, feature extraction and label computation go
/// through this trait and report what they touch, so an instrumented implementation
/// can audit temporal correctness.
pub trait NeighborAccess {
    fn graph(&self) -> &TemporalGraph;
    fn index(&self) -> &AdjacencyIndex;
    /// A node whose attributes are read as model or feature input.
    fn note_input(&self, _node: NodeId) {}
    /// An event timestamp consumed while computing a label.
    fn note_label(&self, _t: i64) {}
}

impl NeighborAccess for Store {
    fn graph(&self) -> &TemporalGraph {
        &self.graph
    }

    fn index(&self) -> &AdjacencyIndex {
        &self.index
    }
}

impl<T: NeighborAccess + ?Sized> NeighborAccess for &T {
    fn graph(&self) -> &TemporalGraph {
        (**self).graph()
    }

    fn index(&self) -> &AdjacencyIndex {
        (**self).index()
    }

    fn note_input(&self, node: NodeId) {
        (**self).note_input(node)
    }

    fn note_label(&self, t: i64) {
        (**self).note_label(t)
    }
}

/// Wraps a store and records the latest input timestamp and the earliest and latest
/// label events seen since the last reset. Safe to share across prediction workers.
pub struct AccessRecorder<'a> {
    store: &'a Store,
    max_input: AtomicI64,
    min_label: AtomicI64,
    max_label: AtomicI64,
    inputs: AtomicU64,
    labels: AtomicU64,
}

impl<'a> AccessRecorder<'a> {
    pub fn new(store: &'a Store) -> AccessRecorder<'a> {
        AccessRecorder {
            store,
            max_input: AtomicI64::new(NEG_INF),
            min_label: AtomicI64::new(i64::MAX),
            max_label: AtomicI64::new(NEG_INF),
            inputs: AtomicU64::new(0),
            labels: AtomicU64::new(0),
        }
    }

    pub fn reset(&self) {
        self.max_input.store(NEG_INF, Relaxed);
        self.min_label.store(i64::MAX, Relaxed);
        self.max_label.store(NEG_INF, Relaxed);
        self.inputs.store(0, Relaxed);
        self.labels.store(0, Relaxed);
    }

    /// Largest timestamp among input nodes read, `NEG_INF` when none or only
    /// dimension rows were read.
    pub fn max_input_time(&self) -> i64 {
        self.max_input.load(Relaxed)
    }

    /// Smallest label event timestamp, `i64::MAX` when none were consumed.
    pub fn min_label_time(&self) -> i64 {
        self.min_label.load(Relaxed)
    }

    /// Largest label event timestamp, `NEG_INF` when none were consumed.
    pub fn max_label_time(&self) -> i64 {
        self.max_label.load(Relaxed)
    }

    pub fn input_reads(&self) -> u64 {
        self.inputs.load(Relaxed)
    }

    pub fn label_reads(&self) -> u64 {
        self.labels.load(Relaxed)
    }
}

impl NeighborAccess for AccessRecorder<'_> {
    fn graph(&self) -> &TemporalGraph {
        &self.store.graph
    }

    fn index(&self) -> &AdjacencyIndex {
        &self.store.index
    }

    fn note_input(&self, node: NodeId) {
        let t = self.store.graph.node_time(node);
        self.max_input.fetch_max(t, Relaxed);
        self.inputs.fetch_add(1, Relaxed);
    }

    fn note_label(&self, t: i64) {
        self.min_label.fetch_min(t, Relaxed);
        self.max_label.fetch_max(t, Relaxed);
        self.labels.fetch_add(1, Relaxed);
    }
}
