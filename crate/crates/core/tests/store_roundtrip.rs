mod common;

use common::roundtrip::round_trip;
use common::{shop, Order};
use proptest::prelude::*;
use relicl::colstore::{load_store, save_store, Store};
use relicl::scm::{sample_database, ScmConfig};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shop_store_round_trips_bit_exact(
        joined in prop::collection::vec(0i64..30, 1..10),
        raw in prop::collection::vec((prop::option::weighted(0.9, 0usize..12), 0i64..60, prop::option::of(any::<f64>())), 0..80),
    ) {
        let orders: Vec<Order> = raw.into_iter().map(|(user, day, price)| Order { user, day, price }).collect();
        prop_assert!(round_trip(&shop(&joined, &orders)));
    }
}

#[test]
fn scm_database_round_trips_bit_exact() {
    for seed in 0..4 {
        let db = sample_database(&ScmConfig::default(), seed).unwrap();
        assert!(round_trip(&Store::build(db.graph)));
    }
}

#[test]
fn corrupt_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.rlst");
    save_store(&shop(&[0, 1], &[]), &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 0xFF;
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_store(&path).is_err());
    std::fs::write(&path, &bytes[..4]).unwrap();
    assert!(load_store(&path).is_err());
}
