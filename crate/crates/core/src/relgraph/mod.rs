//! Relational schema model and construction of the temporal heterogeneous graph.
//!
//! A [`Schema`] names tables, their typed columns, primary keys, time columns and
//! primary/foreign-key links. [`build_graph`] turns a schema plus raw cell data into a
//! [`TemporalGraph`] in which every record is a node and every non-dangling foreign-key
//! value is an edge.

mod edit;
mod expr;
mod graph;
mod infer;

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use edit::{override_schema, SchemaEdit};
pub use expr::{DerivedExpr, ExprError};
pub use graph::{build_graph, NodeId, Table, TemporalGraph};
pub use infer::{export_raw, infer_schema, RawColumn, RawTable};

pub(crate) mod graph_support {
    pub(crate) use super::graph::{build_graph_with, materialize_derived};
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemanticType {
    Identifier,
    Numerical,
    Categorical,
    Text,
    Timestamp,
}

impl SemanticType {
    pub fn as_str(self) -> &'static str {
        match self {
            SemanticType::Identifier => "identifier",
            SemanticType::Numerical => "numerical",
            SemanticType::Categorical => "categorical",
            SemanticType::Text => "text",
            SemanticType::Timestamp => "timestamp",
        }
    }

    /// Whether values are stored as dictionary codes.
    pub fn is_coded(self) -> bool {
        matches!(
            self,
            SemanticType::Identifier | SemanticType::Categorical | SemanticType::Text
        )
    }
}

impl fmt::Display for SemanticType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub name: String,
    pub stype: SemanticType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedColumn {
    pub name: String,
    pub expr: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableMeta {
    pub name: String,
    pub columns: Vec<ColumnMeta>,
    #[serde(default)]
    pub primary_key: Option<String>,
    #[serde(default)]
    pub time_column: Option<String>,
    #[serde(default)]
    pub derived_columns: Vec<DerivedColumn>,
}

impl TableMeta {
    pub fn column(&self, name: &str) -> Option<&ColumnMeta> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn column_mut(&mut self, name: &str) -> Option<&mut ColumnMeta> {
        self.columns.iter_mut().find(|c| c.name == name)
    }

    /// Type of a raw or derived column.
    pub fn stype_of(&self, name: &str) -> Option<SemanticType> {
        if let Some(c) = self.column(name) {
            return Some(c.stype);
        }
        self.derived_columns
            .iter()
            .any(|d| d.name == name)
            .then_some(SemanticType::Numerical)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LinkMeta {
    pub src_table: String,
    pub fkey_column: String,
    pub dst_table: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub tables: Vec<TableMeta>,
    #[serde(default)]
    pub links: Vec<LinkMeta>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchemaError {
    #[error("duplicate table name '{0}'")]
    DuplicateTable(String),
    #[error("table '{table}' has duplicate column '{column}'")]
    DuplicateColumn { table: String, column: String },
    #[error("table '{table}': column name must be non-empty")]
    EmptyColumnName { table: String },
    #[error("no tables given")]
    NoTables,
    #[error("unknown table '{0}'")]
    UnknownTable(String),
    #[error("unknown column '{table}.{column}'")]
    UnknownColumn { table: String, column: String },
    #[error("column '{table}.{column}' has no parseable values")]
    UntypedColumn { table: String, column: String },
    #[error("primary key '{table}.{column}' must have identifier type, found {found}")]
    PrimaryKeyType {
        table: String,
        column: String,
        found: SemanticType,
    },
    #[error("primary key '{table}.{column}' is not unique and non-null")]
    PrimaryKeyNotUnique { table: String, column: String },
    #[error("time column '{table}.{column}' must have timestamp type, found {found}")]
    TimeColumnType {
        table: String,
        column: String,
        found: SemanticType,
    },
    #[error("link {src}.{fkey} -> {dst}: destination table has no primary key")]
    LinkWithoutPrimaryKey { src: String, fkey: String, dst: String },
    #[error("duplicate or cyclic link through '{src}.{fkey}'")]
    DuplicateLink { src: String, fkey: String },
    #[error("derived column '{table}.{column}': {source}")]
    Derived {
        table: String,
        column: String,
        source: ExprError,
    },
    #[error("table '{table}': {message}")]
    Data { table: String, message: String },
}

impl Schema {
    pub fn table(&self, name: &str) -> Option<&TableMeta> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn table_index(&self, name: &str) -> Option<usize> {
        self.tables.iter().position(|t| t.name == name)
    }

    pub fn table_mut(&mut self, name: &str) -> Option<&mut TableMeta> {
        self.tables.iter_mut().find(|t| t.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn from_json(text: &str) -> Result<Schema, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Structural validation that needs no cell data.
    pub fn validate(&self) -> Result<(), SchemaError> {
        if self.tables.is_empty() {
            return Err(SchemaError::NoTables);
        }
        let mut names = HashSet::new();
        for t in &self.tables {
            if !names.insert(t.name.as_str()) {
                return Err(SchemaError::DuplicateTable(t.name.clone()));
            }
            let mut cols = HashSet::new();
            for c in t
                .columns
                .iter()
                .map(|c| c.name.as_str())
                .chain(t.derived_columns.iter().map(|d| d.name.as_str()))
            {
                if c.is_empty() {
                    return Err(SchemaError::EmptyColumnName { table: t.name.clone() });
                }
                if !cols.insert(c) {
                    return Err(SchemaError::DuplicateColumn {
                        table: t.name.clone(),
                        column: c.to_string(),
                    });
                }
            }
            if let Some(pk) = &t.primary_key {
                let col = t.column(pk).ok_or_else(|| SchemaError::UnknownColumn {
                    table: t.name.clone(),
                    column: pk.clone(),
                })?;
                if col.stype != SemanticType::Identifier {
                    return Err(SchemaError::PrimaryKeyType {
                        table: t.name.clone(),
                        column: pk.clone(),
                        found: col.stype,
                    });
                }
            }
            if let Some(tc) = &t.time_column {
                let col = t.column(tc).ok_or_else(|| SchemaError::UnknownColumn {
                    table: t.name.clone(),
                    column: tc.clone(),
                })?;
                if col.stype != SemanticType::Timestamp {
                    return Err(SchemaError::TimeColumnType {
                        table: t.name.clone(),
                        column: tc.clone(),
                        found: col.stype,
                    });
                }
            }
            for d in &t.derived_columns {
                DerivedExpr::parse(&d.expr)
                    .and_then(|e| e.check(t))
                    .map_err(|source| SchemaError::Derived {
                        table: t.name.clone(),
                        column: d.name.clone(),
                        source,
                    })?;
            }
        }
        let mut seen = HashSet::new();
        for l in &self.links {
            let src = self
                .table(&l.src_table)
                .ok_or_else(|| SchemaError::UnknownTable(l.src_table.clone()))?;
            let dst = self
                .table(&l.dst_table)
                .ok_or_else(|| SchemaError::UnknownTable(l.dst_table.clone()))?;
            if src.column(&l.fkey_column).is_none() {
                return Err(SchemaError::UnknownColumn {
                    table: l.src_table.clone(),
                    column: l.fkey_column.clone(),
                });
            }
            if dst.primary_key.is_none() {
                return Err(SchemaError::LinkWithoutPrimaryKey {
                    src: l.src_table.clone(),
                    fkey: l.fkey_column.clone(),
                    dst: l.dst_table.clone(),
                });
            }
            let self_loop = l.src_table == l.dst_table && src.primary_key.as_deref() == Some(l.fkey_column.as_str());
            if self_loop || !seen.insert((l.src_table.as_str(), l.fkey_column.as_str())) {
                return Err(SchemaError::DuplicateLink {
                    src: l.src_table.clone(),
                    fkey: l.fkey_column.clone(),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn users_orders() -> Schema {
        Schema {
            tables: vec![
                TableMeta {
                    name: "users".into(),
                    columns: vec![ColumnMeta {
                        name: "user_id".into(),
                        stype: SemanticType::Identifier,
                    }],
                    primary_key: Some("user_id".into()),
                    time_column: None,
                    derived_columns: vec![],
                },
                TableMeta {
                    name: "orders".into(),
                    columns: vec![
                        ColumnMeta {
                            name: "user_id".into(),
                            stype: SemanticType::Identifier,
                        },
                        ColumnMeta {
                            name: "price".into(),
                            stype: SemanticType::Numerical,
                        },
                    ],
                    primary_key: None,
                    time_column: None,
                    derived_columns: vec![],
                },
            ],
            links: vec![LinkMeta {
                src_table: "orders".into(),
                fkey_column: "user_id".into(),
                dst_table: "users".into(),
            }],
        }
    }

    #[test]
    fn valid_schema_passes() {
        users_orders().validate().unwrap();
    }

    #[test]
    fn duplicate_link_rejected() {
        let mut s = users_orders();
        s.links.push(s.links[0].clone());
        assert!(matches!(s.validate(), Err(SchemaError::DuplicateLink { .. })));
    }

    #[test]
    fn json_field_names_are_stable() {
        let json = users_orders().to_json();
        for key in [
            "\"tables\"",
            "\"links\"",
            "\"columns\"",
            "\"stype\"",
            "\"primary_key\"",
            "\"time_column\"",
            "\"derived_columns\"",
            "\"src_table\"",
            "\"fkey_column\"",
            "\"dst_table\"",
            "\"identifier\"",
        ] {
            assert!(json.contains(key), "missing {key}");
        }
        assert_eq!(Schema::from_json(&json).unwrap(), users_orders());
    }
}
