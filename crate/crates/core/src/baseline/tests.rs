use super::*;
use crate::colstore::{Column, Store};
use crate::relgraph::{ColumnMeta, LinkMeta, Schema, TableMeta};
use crate::scm::make_conjunction;

fn meta(name: &str, stype: SemanticType) -> ColumnMeta {
    ColumnMeta {
        name: name.into(),
        stype,
    }
}

/// `u(id, age)` with orders `o(id, u_id, a, kind, time)`.
fn shop(orders: &[(usize, f64, &str, i64)]) -> Store {
    let schema = Schema {
        tables: vec![
            TableMeta {
                name: "u".into(),
                columns: vec![
                    meta("id", SemanticType::Identifier),
                    meta("age", SemanticType::Numerical),
                ],
                primary_key: Some("id".into()),
                time_column: None,
                derived_columns: Vec::new(),
            },
            TableMeta {
                name: "o".into(),
                columns: vec![
                    meta("id", SemanticType::Identifier),
                    meta("u_id", SemanticType::Identifier),
                    meta("a", SemanticType::Numerical),
                    meta("kind", SemanticType::Categorical),
                    meta("time", SemanticType::Timestamp),
                ],
                primary_key: Some("id".into()),
                time_column: Some("time".into()),
                derived_columns: Vec::new(),
            },
        ],
        links: vec![LinkMeta {
            src_table: "o".into(),
            fkey_column: "u_id".into(),
            dst_table: "u".into(),
        }],
    };
    let users = vec![
        Column::from_strings("id", SemanticType::Identifier, &[Some("u0"), Some("u1")]),
        Column::from_f64("age", &[Some(30.0), None]),
    ];
    let ids: Vec<Option<String>> = (0..orders.len()).map(|i| Some(format!("o{i}"))).collect();
    let fks: Vec<Option<String>> = orders.iter().map(|o| Some(format!("u{}", o.0))).collect();
    let a: Vec<Option<f64>> = orders.iter().map(|o| Some(o.1)).collect();
    let kind: Vec<Option<&str>> = orders.iter().map(|o| Some(o.2)).collect();
    let time: Vec<Option<i64>> = orders.iter().map(|o| Some(o.3)).collect();
    let o = vec![
        Column::from_strings("id", SemanticType::Identifier, &ids),
        Column::from_strings("u_id", SemanticType::Identifier, &fks),
        Column::from_f64("a", &a),
        Column::from_strings("kind", SemanticType::Categorical, &kind),
        Column::from_times("time", &time),
    ];
    Store::build(TemporalGraph::from_columns(schema, vec![users, o]).unwrap())
}

fn value(spec: &FlatSpec, row: &FlatRow, name: &str) -> Option<f64> {
    let j = spec
        .names()
        .iter()
        .position(|n| n == name)
        .unwrap_or_else(|| panic!("no feature {name} in {:?}", spec.names()));
    row.values[j]
}

#[test]
fn feature_names_are_deterministic() {
    let store = shop(&[(0, 1.0, "x", 10)]);
    let spec = FlatSpec::new(store.graph(), 0, 2, &[]).unwrap();
    assert_eq!(
        spec.names(),
        [
            "u.age",
            "o<u_id:COUNT",
            "o<u_id:a:SUM",
            "o<u_id:a:MEAN",
            "o<u_id:a:MIN",
            "o<u_id:a:MAX",
            "o<u_id:kind:COUNT_DISTINCT",
            "o<u_id:kind:MODE_FREQ",
        ]
    );
    assert_eq!(FlatSpec::new(store.graph(), 0, 2, &[]).unwrap().names(), spec.names());
    assert!(matches!(
        FlatSpec::new(store.graph(), 0, 3, &[]),
        Err(BaselineError::Depth(3))
    ));
}

#[test]
fn aggregates_and_anchor() {
    let store = shop(&[
        (0, 1.0, "x", 10),
        (0, 0.0, "y", 20),
        (0, 1.0, "x", 30),
        (0, 5.0, "z", 40),
    ]);
    let spec = FlatSpec::new(store.graph(), 0, 1, &[]).unwrap();
    let row = dfs_flatten(&store, &spec, 0, 30).unwrap();
    assert_eq!(value(&spec, &row, "u.age"), Some(30.0));
    assert_eq!(value(&spec, &row, "o<u_id:COUNT"), Some(3.0));
    assert_eq!(value(&spec, &row, "o<u_id:a:MEAN"), Some(2.0 / 3.0));
    assert_eq!(value(&spec, &row, "o<u_id:a:SUM"), Some(2.0));
    assert_eq!(value(&spec, &row, "o<u_id:a:MIN"), Some(0.0));
    assert_eq!(value(&spec, &row, "o<u_id:a:MAX"), Some(1.0));
    assert_eq!(value(&spec, &row, "o<u_id:kind:COUNT_DISTINCT"), Some(2.0));
    assert_eq!(value(&spec, &row, "o<u_id:kind:MODE_FREQ"), Some(2.0));

    // Deleting rows after the anchor changes nothing.
    let truncated = Store::build(store.graph().truncate_after(30));
    assert_eq!(dfs_flatten(&truncated, &spec, 0, 30).unwrap(), row);
}

#[test]
fn entity_without_children() {
    let store = shop(&[(0, 1.0, "x", 10)]);
    let spec = FlatSpec::new(store.graph(), 0, 1, &[]).unwrap();
    let row = dfs_flatten(&store, &spec, 1, 100).unwrap();
    assert_eq!(value(&spec, &row, "u.age"), None);
    assert_eq!(value(&spec, &row, "o<u_id:COUNT"), Some(0.0));
    assert!(row.values[2..].iter().all(Option::is_none));
    assert!(matches!(
        dfs_flatten(&store, &spec, 2, 100),
        Err(BaselineError::UnknownEntity { .. })
    ));
}

#[test]
fn features_ignore_child_row_order() {
    let a = shop(&[(0, 1.0, "x", 10), (0, 0.0, "y", 20), (0, 3.0, "x", 20)]);
    let b = shop(&[(0, 3.0, "x", 20), (0, 1.0, "x", 10), (0, 0.0, "y", 20)]);
    let spec = FlatSpec::new(a.graph(), 0, 2, &[]).unwrap();
    assert_eq!(
        dfs_flatten(&a, &spec, 0, 50).unwrap(),
        dfs_flatten(&b, &spec, 0, 50).unwrap()
    );
}

#[test]
fn depth_two_reaches_siblings() {
    let store = shop(&[(0, 1.0, "x", 10), (1, 2.0, "y", 20)]);
    // From an order: its user, then that user's orders.
    let spec = FlatSpec::new(store.graph(), 1, 2, &[]).unwrap();
    let row = dfs_flatten(&store, &spec, 0, 50).unwrap();
    assert_eq!(value(&spec, &row, "u>u_id:COUNT"), Some(1.0));
    assert!(spec.names().iter().all(|n| !n.starts_with("u>u_id/o<u_id")));
}

#[test]
fn conjunction_pairs_flatten_identically() {
    let task = make_conjunction(40, 4, 3).unwrap();
    let store = Store::build(task.graph.clone());
    let spec = FlatSpec::for_plan(store.graph(), &task.plan, 2).unwrap();
    assert!(spec.names().iter().all(|n| !n.contains("label")));
    for p in 0..20u32 {
        let a = dfs_flatten(&store, &spec, 2 * p, task.rows[0].anchor).unwrap();
        let b = dfs_flatten(&store, &spec, 2 * p + 1, task.rows[0].anchor).unwrap();
        assert_eq!(a.values, b.values);
        assert_ne!(task.rows[2 * p as usize].target, task.rows[2 * p as usize + 1].target);
    }
}

fn flat(values: &[f64]) -> FlatRow {
    FlatRow {
        entity: 0,
        anchor: 0,
        values: values.iter().map(|&v| Some(v)).collect(),
    }
}

#[test]
fn logistic_fit_separates_separable_data() {
    let pts = [
        (0.0, 0.0, 0.0),
        (1.0, 0.2, 0.0),
        (0.3, 1.0, 0.0),
        (2.0, 2.0, 1.0),
        (3.0, 1.5, 1.0),
        (2.2, 3.0, 1.0),
    ];
    let rows: Vec<FlatRow> = pts.iter().map(|p| flat(&[p.0, p.1])).collect();
    let labels: Vec<f64> = pts.iter().map(|p| p.2).collect();
    let m = linear_fit(&rows, &labels, 2000, 0.5, 1).unwrap();
    for (r, y) in rows.iter().zip(&labels) {
        let s = linear_predict(&m, r).unwrap();
        assert_eq!(s > 0.0, *y == 1.0);
    }
    assert_eq!(linear_fit(&rows, &labels, 2000, 0.5, 1).unwrap(), m);
}

#[test]
fn identical_rows_score_identically() {
    let rows = vec![flat(&[1.0, 2.0]); 4];
    let m = linear_fit(&rows, &[0.0, 1.0, 0.0, 1.0], 100, 0.1, 0).unwrap();
    let s: Vec<f64> = rows.iter().map(|r| linear_predict(&m, r).unwrap()).collect();
    assert!(s.iter().all(|&x| x == s[0]));
}

#[test]
fn fit_errors() {
    let rows = vec![flat(&[1.0]); 3];
    assert!(matches!(
        linear_fit(&rows, &[0.0, 1.0], 1, 0.1, 0),
        Err(BaselineError::LengthMismatch { .. })
    ));
    assert!(matches!(
        linear_fit(&rows, &[0.0, 1.0, 2.0], 1, 0.1, 0),
        Err(BaselineError::Label(_))
    ));
    let m = linear_fit(&rows, &[0.0, 1.0, 1.0], 1, 0.1, 0).unwrap();
    assert!(matches!(
        linear_predict(&m, &flat(&[1.0, 2.0])),
        Err(BaselineError::Width { .. })
    ));
}

#[test]
fn csv_export() {
    let store = shop(&[(0, 1.5, "x", 10)]);
    let spec = FlatSpec::new(store.graph(), 0, 1, &[]).unwrap();
    let rows = vec![
        dfs_flatten(&store, &spec, 0, 20).unwrap(),
        dfs_flatten(&store, &spec, 1, 20).unwrap(),
    ];
    let mut buf = Vec::new();
    write_flat_csv(&mut buf, &spec, &rows).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("entity,anchor_time,u.age,o<u_id:COUNT"));
    assert_eq!(lines[1], "0,20,30.0,1.0,1.5,1.5,1.5,1.5,1.0,1.0");
    assert_eq!(lines[2], "1,20,,0.0,,,,,,");
}
