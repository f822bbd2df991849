//! Store save/load comparison.

use relicl::colstore::{load_store, save_store, Column, Store};

fn same_column(a: &Column, b: &Column, rows: usize) -> bool {
    (0..rows).all(|r| {
        a.is_valid(r) == b.is_valid(r)
            && a.f64_at(r).map(f64::to_bits) == b.f64_at(r).map(f64::to_bits)
            && a.time_at(r) == b.time_at(r)
            && a.code_at(r) == b.code_at(r)
            && a.render(r) == b.render(r)
    })
}

/// Cell-by-cell and edge-by-edge comparison, floats by bit pattern.
pub fn same_store(a: &Store, b: &Store) -> bool {
    let tables = a.graph.tables().len() == b.graph.tables().len()
        && a.graph.tables().iter().zip(b.graph.tables()).all(|(ta, tb)| {
            ta.row_count() == tb.row_count()
                && ta.times() == tb.times()
                && ta.columns().len() == tb.columns().len()
                && ta
                    .columns()
                    .iter()
                    .zip(tb.columns())
                    .all(|(ca, cb)| same_column(ca, cb, ta.row_count()))
        });
    let types_a: Vec<_> = a.index.edge_types().collect();
    let types_b: Vec<_> = b.index.edge_types().collect();
    let edges = types_a == types_b
        && types_a.iter().all(|&(et, _)| {
            let (x, y) = (a.index.csr(et), b.index.csr(et));
            x.offsets() == y.offsets() && x.neighbors() == y.neighbors() && x.times() == y.times()
        });
    a.graph.schema().to_json() == b.graph.schema().to_json() && tables && edges
}

/// Saves, loads and saves again; true when the loaded store equals the original and
/// both files are byte-identical.
pub fn round_trip(store: &Store) -> bool {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a.rlst");
    save_store(store, &first).unwrap();
    let loaded = load_store(&first).unwrap();
    let second = dir.path().join("b.rlst");
    save_store(&loaded, &second).unwrap();
    same_store(store, &loaded) && std::fs::read(&first).unwrap() == std::fs::read(&second).unwrap()
}
