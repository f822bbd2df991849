//! Deterministic schema inference from raw string cells.
//!
//! Rules, applied in order:
//! 1. column types: `id`/`*_id`/`<table>id` names are identifiers; columns whose values
//!    all parse as ISO dates are timestamps; all-numeric columns are numerical; string
//!    columns averaging three or more words are text, other strings categorical.
//! 2. primary key: first unique, non-null column named `id`, `<table>id` or
//!    `<table>_id` (the table name may also be singularized by dropping a trailing `s`).
//! 3. time column: first timestamp column whose name mentions `time` or `date`,
//!    otherwise the first timestamp column.
//! 4. links: a column named like another table's primary key whose distinct values are
//!    a subset of that key's values.

use std::collections::HashSet;

use super::{ColumnMeta, LinkMeta, Schema, SchemaError, SemanticType, TableMeta, TemporalGraph};
use crate::time::parse_timestamp;

const TYPE_SAMPLE: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct RawColumn {
    pub name: String,
    pub values: Vec<Option<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub name: String,
    pub columns: Vec<RawColumn>,
}

impl RawTable {
    pub fn column(&self, name: &str) -> Option<&RawColumn> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn row_count(&self) -> usize {
        self.columns.first().map_or(0, |c| c.values.len())
    }
}

fn singular(name: &str) -> &str {
    name.strip_suffix('s').unwrap_or(name)
}

fn pk_candidates(table: &str) -> Vec<String> {
    let t = table.to_lowercase();
    let s = singular(&t).to_string();
    vec![
        "id".to_string(),
        format!("{t}id"),
        format!("{t}_id"),
        format!("{s}id"),
        format!("{s}_id"),
    ]
}

fn looks_like_identifier(column: &str, all_tables: &[RawTable]) -> bool {
    let c = column.to_lowercase();
    c == "id" || c.ends_with("_id") || all_tables.iter().any(|t| pk_candidates(&t.name).contains(&c))
}

fn infer_type(table: &str, col: &RawColumn, all_tables: &[RawTable]) -> Result<SemanticType, SchemaError> {
    let sample: Vec<&str> = col
        .values
        .iter()
        .flatten()
        .map(String::as_str)
        .take(TYPE_SAMPLE)
        .collect();
    if sample.is_empty() {
        return Err(SchemaError::UntypedColumn {
            table: table.to_string(),
            column: col.name.clone(),
        });
    }
    if looks_like_identifier(&col.name, all_tables) {
        return Ok(SemanticType::Identifier);
    }
    if sample.iter().all(|v| parse_timestamp(v).is_some()) {
        return Ok(SemanticType::Timestamp);
    }
    if sample.iter().all(|v| v.trim().parse::<f64>().is_ok()) {
        return Ok(SemanticType::Numerical);
    }
    let words: usize = sample.iter().map(|v| v.split_whitespace().count()).sum();
    if words as f64 / sample.len() as f64 >= 3.0 {
        Ok(SemanticType::Text)
    } else {
        Ok(SemanticType::Categorical)
    }
}

fn unique_non_null(col: &RawColumn) -> bool {
    let mut seen = HashSet::with_capacity(col.values.len());
    col.values
        .iter()
        .all(|v| v.as_ref().is_some_and(|s| seen.insert(s.as_str())))
}

/// Infers a schema from raw tables. See the module docs for the rules.
pub fn infer_schema(raw: &[RawTable]) -> Result<Schema, SchemaError> {
    if raw.is_empty() {
        return Err(SchemaError::NoTables);
    }
    let mut names = HashSet::new();
    for t in raw {
        if !names.insert(t.name.as_str()) {
            return Err(SchemaError::DuplicateTable(t.name.clone()));
        }
        let mut cols = HashSet::new();
        for c in &t.columns {
            if c.name.is_empty() {
                return Err(SchemaError::EmptyColumnName { table: t.name.clone() });
            }
            if !cols.insert(c.name.as_str()) {
                return Err(SchemaError::DuplicateColumn {
                    table: t.name.clone(),
                    column: c.name.clone(),
                });
            }
        }
    }

    let mut tables = Vec::with_capacity(raw.len());
    for t in raw {
        let mut columns = Vec::with_capacity(t.columns.len());
        for c in &t.columns {
            columns.push(ColumnMeta {
                name: c.name.clone(),
                stype: infer_type(&t.name, c, raw)?,
            });
        }
        let candidates = pk_candidates(&t.name);
        let primary_key = t
            .columns
            .iter()
            .find(|c| candidates.contains(&c.name.to_lowercase()) && unique_non_null(c))
            .map(|c| c.name.clone());
        let timestamps: Vec<&ColumnMeta> = columns.iter().filter(|c| c.stype == SemanticType::Timestamp).collect();
        let time_column = timestamps
            .iter()
            .find(|c| {
                let n = c.name.to_lowercase();
                n.contains("time") || n.contains("date")
            })
            .or(timestamps.first())
            .map(|c| c.name.clone());
        tables.push(TableMeta {
            name: t.name.clone(),
            columns,
            primary_key,
            time_column,
            derived_columns: Vec::new(),
        });
    }

    let mut links = Vec::new();
    for (si, src) in raw.iter().enumerate() {
        for col in &src.columns {
            if tables[si].primary_key.as_deref() == Some(col.name.as_str()) {
                continue;
            }
            let target = tables
                .iter()
                .enumerate()
                .find(|(di, dst)| *di != si && dst.primary_key.as_deref() == Some(col.name.as_str()));
            let Some((di, _)) = target else { continue };
            let pk = raw[di].column(&col.name).expect("primary key column exists");
            let domain: HashSet<&str> = pk.values.iter().flatten().map(String::as_str).collect();
            if col.values.iter().flatten().all(|v| domain.contains(v.as_str())) {
                links.push(LinkMeta {
                    src_table: src.name.clone(),
                    fkey_column: col.name.clone(),
                    dst_table: raw[di].name.clone(),
                });
                if let Some(c) = tables[si].column_mut(&col.name) {
                    c.stype = SemanticType::Identifier;
                }
            }
        }
    }

    let schema = Schema { tables, links };
    schema.validate()?;
    Ok(schema)
}

/// Renders every raw (non-derived) column of a graph back to strings, in the form
/// [`infer_schema`] consumes.
pub fn export_raw(graph: &TemporalGraph) -> Vec<RawTable> {
    graph
        .tables()
        .iter()
        .map(|t| {
            let meta = graph.schema().table(t.name()).expect("table in schema");
            RawTable {
                name: t.name().to_string(),
                columns: meta
                    .columns
                    .iter()
                    .map(|cm| {
                        let col = t.column(&cm.name).expect("column present");
                        RawColumn {
                            name: cm.name.clone(),
                            values: (0..t.row_count()).map(|r| col.render(r)).collect(),
                        }
                    })
                    .collect(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn raw(name: &str, cols: &[(&str, &[&str])]) -> RawTable {
        RawTable {
            name: name.to_string(),
            columns: cols
                .iter()
                .map(|(n, vals)| RawColumn {
                    name: n.to_string(),
                    values: vals.iter().map(|v| (!v.is_empty()).then(|| v.to_string())).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn users_orders_items() {
        let users = raw("users", &[("user_id", &["u1", "u2", "u3"]), ("age", &["31", "", "45"])]);
        let orders = raw(
            "orders",
            &[
                ("order_id", &["o1", "o2", "o3"]),
                ("user_id", &["u1", "u1", "u2"]),
                ("item_id", &["i1", "i2", "i1"]),
                ("price", &["1.0", "2.5", "3"]),
                ("created_at", &["2024-01-01", "2024-01-05", "2024-02-01"]),
                ("order_date", &["2024-01-01", "2024-01-05", "2024-02-01"]),
            ],
        );
        let items = raw(
            "items",
            &[
                ("item_id", &["i1", "i2"]),
                ("category", &["toys", "books"]),
                ("description", &["a small red toy", "an old hardcover book"]),
            ],
        );
        let s = infer_schema(&[users, orders, items]).unwrap();
        assert_eq!(s.table("users").unwrap().primary_key.as_deref(), Some("user_id"));
        assert_eq!(s.table("orders").unwrap().primary_key.as_deref(), Some("order_id"));
        assert_eq!(s.table("orders").unwrap().time_column.as_deref(), Some("order_date"));
        assert_eq!(s.table("users").unwrap().time_column, None);
        let items = s.table("items").unwrap();
        assert_eq!(items.column("category").unwrap().stype, SemanticType::Categorical);
        assert_eq!(items.column("description").unwrap().stype, SemanticType::Text);
        assert_eq!(
            s.table("orders").unwrap().column("price").unwrap().stype,
            SemanticType::Numerical
        );
        assert_eq!(
            s.links,
            vec![
                LinkMeta {
                    src_table: "orders".into(),
                    fkey_column: "user_id".into(),
                    dst_table: "users".into()
                },
                LinkMeta {
                    src_table: "orders".into(),
                    fkey_column: "item_id".into(),
                    dst_table: "items".into()
                },
            ]
        );
    }

    #[test]
    fn single_table_id() {
        let t = raw("things", &[("id", &["1", "2", "3"]), ("x", &["0.5", "1", "2"])]);
        let s = infer_schema(&[t]).unwrap();
        assert_eq!(s.tables[0].primary_key.as_deref(), Some("id"));
        assert!(s.links.is_empty());
    }

    #[test]
    fn non_subset_is_not_a_link() {
        let users = raw("users", &[("user_id", &["u1", "u2"])]);
        let orders = raw("orders", &[("user_id", &["u1", "u9"])]);
        let s = infer_schema(&[users, orders]).unwrap();
        assert!(s.links.is_empty());
    }

    #[test]
    fn errors() {
        let a = raw("a", &[("id", &["1"])]);
        assert!(matches!(
            infer_schema(&[a.clone(), a.clone()]),
            Err(SchemaError::DuplicateTable(_))
        ));
        let empty = raw("b", &[("x", &["", ""])]);
        assert!(matches!(infer_schema(&[empty]), Err(SchemaError::UntypedColumn { .. })));
        assert!(matches!(infer_schema(&[]), Err(SchemaError::NoTables)));
        let dup = raw("c", &[("x", &["1"]), ("x", &["2"])]);
        assert!(matches!(infer_schema(&[dup]), Err(SchemaError::DuplicateColumn { .. })));
    }

    #[test]
    fn non_unique_id_is_not_primary_key() {
        let t = raw("t", &[("id", &["1", "1"])]);
        let s = infer_schema(&[t]).unwrap();
        assert_eq!(s.tables[0].primary_key, None);
    }
}
