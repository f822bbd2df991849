#![allow(dead_code, unused_imports)]

use relicl::colstore::{Column, Store};
use relicl::relgraph::{ColumnMeta, LinkMeta, Schema, SemanticType, TableMeta, TemporalGraph};
use relicl::time::MS_PER_DAY;

/// One generated order: owning user (None = null key, out of range = dangling key),
/// day, price.
#[derive(Debug, Clone)]
pub struct Order {
    pub user: Option<usize>,
    pub day: i64,
    pub price: Option<f64>,
}

fn meta(name: &str, stype: SemanticType) -> ColumnMeta {
    ColumnMeta {
        name: name.into(),
        stype,
    }
}

/// `users(user_id, age, joined)` and `orders(order_id, user_id, price, t)`; users join
/// on `joined_days[i]`, orders happen on their day.
pub fn shop(joined_days: &[i64], orders: &[Order]) -> Store {
    let schema = Schema {
        tables: vec![
            TableMeta {
                name: "users".into(),
                columns: vec![
                    meta("user_id", SemanticType::Identifier),
                    meta("age", SemanticType::Numerical),
                    meta("joined", SemanticType::Timestamp),
                ],
                primary_key: Some("user_id".into()),
                time_column: Some("joined".into()),
                derived_columns: vec![],
            },
            TableMeta {
                name: "orders".into(),
                columns: vec![
                    meta("order_id", SemanticType::Identifier),
                    meta("user_id", SemanticType::Identifier),
                    meta("price", SemanticType::Numerical),
                    meta("t", SemanticType::Timestamp),
                ],
                primary_key: Some("order_id".into()),
                time_column: Some("t".into()),
                derived_columns: vec![],
            },
        ],
        links: vec![LinkMeta {
            src_table: "orders".into(),
            fkey_column: "user_id".into(),
            dst_table: "users".into(),
        }],
    };
    let n = joined_days.len();
    let keys: Vec<Option<String>> = (0..n).map(|i| Some(format!("u{i}"))).collect();
    let ages: Vec<Option<f64>> = (0..n).map(|i| Some(18.0 + (i * 7 % 50) as f64)).collect();
    let joined: Vec<Option<i64>> = joined_days.iter().map(|d| Some(d * MS_PER_DAY)).collect();
    let order_ids: Vec<Option<String>> = (0..orders.len()).map(|i| Some(format!("o{i}"))).collect();
    let fks: Vec<Option<String>> = orders.iter().map(|o| o.user.map(|u| format!("u{u}"))).collect();
    let prices: Vec<Option<f64>> = orders.iter().map(|o| o.price).collect();
    let times: Vec<Option<i64>> = orders.iter().map(|o| Some(o.day * MS_PER_DAY)).collect();
    let graph = TemporalGraph::from_columns(
        schema,
        vec![
            vec![
                Column::from_strings("user_id", SemanticType::Identifier, &keys),
                Column::from_f64("age", &ages),
                Column::from_times("joined", &joined),
            ],
            vec![
                Column::from_strings("order_id", SemanticType::Identifier, &order_ids),
                Column::from_strings("user_id", SemanticType::Identifier, &fks),
                Column::from_f64("price", &prices),
                Column::from_times("t", &times),
            ],
        ],
    )
    .expect("valid shop graph");
    Store::build(graph)
}

pub mod audit;
pub mod oracle;
pub mod pqlgen;
pub mod roundtrip;

/// Writes `users.csv` and `orders.csv` for the CLI: 40 users, orders over early 2026.
pub fn write_shop_csv(dir: &std::path::Path) {
    use std::fmt::Write as _;
    let mut users = String::from("user_id,age,country\n");
    let mut orders = String::from("order_id,user_id,order_date,price\n");
    let mut order = 0;
    for u in 0..40 {
        writeln!(users, "u{u},{},{}", 20 + u % 37, ["de", "fr", "us"][u % 3]).unwrap();
        for k in 0..(u % 6) {
            let day = (u * 11 + k * 17) % 110;
            let date = chrono::NaiveDate::from_ymd_opt(2026, 1, 1).unwrap() + chrono::Days::new(day as u64);
            writeln!(orders, "o{order},u{u},{date},{}.25", 2 + (u + k) % 9).unwrap();
            order += 1;
        }
    }
    std::fs::write(dir.join("users.csv"), users).unwrap();
    std::fs::write(dir.join("orders.csv"), orders).unwrap();
}
