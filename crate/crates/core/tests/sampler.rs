use std::collections::HashSet;

use proptest::prelude::*;
use relicl::colstore::Store;
use relicl::relgraph::NodeId;
use relicl::sampler::{sample_subgraph, SampleOptions, SamplePolicy, SampledSubgraph, DELTA_INF};
use relicl::scm::{sample_database, ScmConfig};

fn database(seed: u64) -> Store {
    let cfg = ScmConfig {
        n_entities: 30,
        rows_per_entity: 4.0,
        child_tables: (1, 3),
        chain_prob: 0.5,
        ..ScmConfig::default()
    };
    Store::build(sample_database(&cfg, seed).unwrap().graph)
}

fn check_invariants(store: &Store, sg: &SampledSubgraph, opts: &SampleOptions) {
    let graph = &store.graph;
    assert_eq!(sg.hops[0], 0);
    assert_eq!(sg.nodes.len(), sg.hops.len());
    assert_eq!(sg.nodes.len(), sg.delta.len());
    let unique: HashSet<NodeId> = sg.nodes.iter().copied().collect();
    assert_eq!(unique.len(), sg.nodes.len());
    for (i, &n) in sg.nodes.iter().enumerate() {
        let t = graph.node_time(n);
        assert!(t <= sg.anchor, "node {n:?} at {t} after anchor {}", sg.anchor);
        assert!(sg.hops[i] as usize <= opts.depth());
        if sg.delta[i] != DELTA_INF {
            assert_eq!(sg.delta[i], sg.anchor - t);
            assert!(sg.delta[i] >= 0);
        }
    }
    for e in &sg.edges {
        assert!((e.src as usize) < sg.len() && (e.dst as usize) < sg.len());
        assert!(!e.edge_type.is_reverse());
        let info = store.index.info(e.edge_type).unwrap();
        assert_eq!(sg.nodes[e.src as usize].table, info.from_table);
        assert_eq!(sg.nodes[e.dst as usize].table, info.to_table);
        assert_eq!(e.hop, sg.hops[e.src as usize].max(sg.hops[e.dst as usize]));
    }
}

fn node_set(sg: &SampledSubgraph) -> HashSet<NodeId> {
    sg.nodes.iter().copied().collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn subgraphs_are_well_formed_and_monotone(
        seed in 0u64..6,
        entity in 0usize..30,
        anchor_frac in 0.0f64..1.0,
        fanouts in prop::collection::vec(1usize..6, 0..4),
        uniform in prop::bool::ANY,
    ) {
        let store = database(seed);
        let (lo, hi) = (store.graph.min_time().unwrap(), store.graph.max_time().unwrap());
        let anchor = lo + ((hi - lo) as f64 * anchor_frac) as i64;
        let root = NodeId::new(0, entity);
        let mut opts = SampleOptions::new(&fanouts);
        opts.seed = seed;
        if uniform {
            opts.policy = SamplePolicy::Uniform;
        }
        let sg = sample_subgraph(&store, root, anchor, &opts).unwrap();
        check_invariants(&store, &sg, &opts);
        prop_assert_eq!(sg.root(), root);
        prop_assert_eq!(&sample_subgraph(&store, root, anchor, &opts).unwrap(), &sg);

        if !uniform {
            // Larger fanouts and deeper sampling only add nodes.
            let wider = SampleOptions::new(&fanouts.iter().map(|f| f + 1).collect::<Vec<_>>());
            let deeper = SampleOptions::new(&[fanouts.clone(), vec![2]].concat());
            let base = node_set(&sg);
            prop_assert!(base.is_subset(&node_set(&sample_subgraph(&store, root, anchor, &wider).unwrap())));
            prop_assert!(base.is_subset(&node_set(&sample_subgraph(&store, root, anchor, &deeper).unwrap())));
        }

        let mut dropped = opts.clone();
        dropped.edge_drop = 1.0;
        let alone = sample_subgraph(&store, root, anchor, &dropped).unwrap();
        prop_assert_eq!(alone.nodes, vec![root]);
        prop_assert!(alone.edges.is_empty());
    }
}

#[test]
fn anchors_must_be_finite_and_after_the_root() {
    let store = database(0);
    let root = NodeId::new(0, 0);
    let opts = SampleOptions::default();
    assert!(sample_subgraph(&store, root, i64::MAX, &opts).is_err());
    assert!(sample_subgraph(&store, root, i64::MIN, &opts).is_err());
    assert!(sample_subgraph(&store, NodeId::new(0, 10_000), 0, &opts).is_err());
}
