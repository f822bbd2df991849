//! Large synthetic stores for throughput measurements.

use rand::Rng;

use super::column::{Bitmap, Buf, Column, ColumnData, Dictionary};
use super::Store;
use crate::relgraph::{ColumnMeta, LinkMeta, Schema, SemanticType, TableMeta, TemporalGraph};
use crate::time::MS_PER_DAY;
use crate::util::rng_for;

/// Two tables, `parent(id)` and `event(parent_id, ts)`, with `n_edges` event rows
/// attached to uniformly drawn parents at uniform times over one year.
pub fn synthetic_store(n_parents: usize, n_edges: usize, seed: u64) -> Store {
    assert!(n_parents > 0, "need at least one parent");
    let mut rng = rng_for(&[seed, 0x5717]);
    let keys: Vec<String> = (0..n_parents).map(|i| format!("p{i}")).collect();
    let dict = Dictionary::from_values(&keys);
    let parent_id = Column {
        name: "id".into(),
        stype: SemanticType::Identifier,
        data: ColumnData::Codes {
            codes: Buf::Owned((0..n_parents as u32).collect()),
            dict: dict.clone(),
        },
        valid: Bitmap::from_bools(&vec![true; n_parents]),
    };
    let fk: Vec<u32> = (0..n_edges).map(|_| rng.gen_range(0..n_parents as u32)).collect();
    let ts: Vec<i64> = (0..n_edges).map(|_| rng.gen_range(0..365 * MS_PER_DAY)).collect();
    let valid = Bitmap::from_bools(&vec![true; n_edges]);
    let event_fk = Column {
        name: "parent_id".into(),
        stype: SemanticType::Identifier,
        data: ColumnData::Codes {
            codes: Buf::Owned(fk),
            dict,
        },
        valid: valid.clone(),
    };
    let event_ts = Column {
        name: "ts".into(),
        stype: SemanticType::Timestamp,
        data: ColumnData::Time(Buf::Owned(ts)),
        valid,
    };
    let meta = |name: &str, stype| ColumnMeta {
        name: name.into(),
        stype,
    };
    let schema = Schema {
        tables: vec![
            TableMeta {
                name: "parent".into(),
                columns: vec![meta("id", SemanticType::Identifier)],
                primary_key: Some("id".into()),
                time_column: None,
                derived_columns: Vec::new(),
            },
            TableMeta {
                name: "event".into(),
                columns: vec![
                    meta("parent_id", SemanticType::Identifier),
                    meta("ts", SemanticType::Timestamp),
                ],
                primary_key: None,
                time_column: Some("ts".into()),
                derived_columns: Vec::new(),
            },
        ],
        links: vec![LinkMeta {
            src_table: "event".into(),
            fkey_column: "parent_id".into(),
            dst_table: "parent".into(),
        }],
    };
    let graph = TemporalGraph::from_columns(schema, vec![vec![parent_id], vec![event_fk, event_ts]])
        .expect("synthetic schema is valid");
    Store::build(graph)
}
