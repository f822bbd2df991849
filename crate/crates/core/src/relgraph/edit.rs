use serde::{Deserialize, Serialize};

use super::{DerivedColumn, DerivedExpr, LinkMeta, Schema, SchemaError, SemanticType};

/// A manual refinement of an inferred schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "edit", rename_all = "snake_case")]
pub enum SchemaEdit {
    SetPkey {
        table: String,
        column: String,
    },
    SetStype {
        table: String,
        column: String,
        stype: SemanticType,
    },
    SetTimeColumn {
        table: String,
        column: Option<String>,
    },
    AddLink {
        src_table: String,
        fkey: String,
        dst_table: String,
    },
    AddDerivedColumn {
        table: String,
        name: String,
        expr: String,
    },
}

/// Applies edits in order and revalidates the result.
pub fn override_schema(schema: &Schema, edits: &[SchemaEdit]) -> Result<Schema, SchemaError> {
    let mut s = schema.clone();
    for edit in edits {
        match edit {
            SchemaEdit::SetPkey { table, column } => {
                let t = s
                    .table_mut(table)
                    .ok_or_else(|| SchemaError::UnknownTable(table.clone()))?;
                let c = t.column_mut(column).ok_or_else(|| SchemaError::UnknownColumn {
                    table: table.clone(),
                    column: column.clone(),
                })?;
                c.stype = SemanticType::Identifier;
                t.primary_key = Some(column.clone());
            }
            SchemaEdit::SetStype { table, column, stype } => {
                let t = s
                    .table_mut(table)
                    .ok_or_else(|| SchemaError::UnknownTable(table.clone()))?;
                let c = t.column_mut(column).ok_or_else(|| SchemaError::UnknownColumn {
                    table: table.clone(),
                    column: column.clone(),
                })?;
                c.stype = *stype;
            }
            SchemaEdit::SetTimeColumn { table, column } => {
                let t = s
                    .table_mut(table)
                    .ok_or_else(|| SchemaError::UnknownTable(table.clone()))?;
                t.time_column = column.clone();
            }
            SchemaEdit::AddLink {
                src_table,
                fkey,
                dst_table,
            } => {
                let dst = s
                    .table(dst_table)
                    .ok_or_else(|| SchemaError::UnknownTable(dst_table.clone()))?;
                if dst.primary_key.is_none() {
                    return Err(SchemaError::LinkWithoutPrimaryKey {
                        src: src_table.clone(),
                        fkey: fkey.clone(),
                        dst: dst_table.clone(),
                    });
                }
                let src = s
                    .table_mut(src_table)
                    .ok_or_else(|| SchemaError::UnknownTable(src_table.clone()))?;
                let c = src.column_mut(fkey).ok_or_else(|| SchemaError::UnknownColumn {
                    table: src_table.clone(),
                    column: fkey.clone(),
                })?;
                c.stype = SemanticType::Identifier;
                let link = LinkMeta {
                    src_table: src_table.clone(),
                    fkey_column: fkey.clone(),
                    dst_table: dst_table.clone(),
                };
                if !s.links.contains(&link) {
                    s.links.push(link);
                }
            }
            SchemaEdit::AddDerivedColumn { table, name, expr } => {
                let t = s
                    .table_mut(table)
                    .ok_or_else(|| SchemaError::UnknownTable(table.clone()))?;
                DerivedExpr::parse(expr)
                    .and_then(|e| e.check(t))
                    .map_err(|source| SchemaError::Derived {
                        table: table.clone(),
                        column: name.clone(),
                        source,
                    })?;
                t.derived_columns.push(DerivedColumn {
                    name: name.clone(),
                    expr: expr.clone(),
                });
            }
        }
    }
    s.validate()?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relgraph::{ColumnMeta, TableMeta};

    fn schema() -> Schema {
        let col = |n: &str, t| ColumnMeta {
            name: n.into(),
            stype: t,
        };
        Schema {
            tables: vec![
                TableMeta {
                    name: "users".into(),
                    columns: vec![col("user_id", SemanticType::Identifier)],
                    primary_key: None,
                    time_column: None,
                    derived_columns: vec![],
                },
                TableMeta {
                    name: "orders".into(),
                    columns: vec![
                        col("user_id", SemanticType::Identifier),
                        col("price", SemanticType::Numerical),
                        col("quantity", SemanticType::Numerical),
                        col("note", SemanticType::Text),
                    ],
                    primary_key: None,
                    time_column: None,
                    derived_columns: vec![],
                },
                TableMeta {
                    name: "items".into(),
                    columns: vec![col("category", SemanticType::Text)],
                    primary_key: None,
                    time_column: None,
                    derived_columns: vec![],
                },
            ],
            links: vec![],
        }
    }

    #[test]
    fn listing_edits_apply() {
        let s = override_schema(
            &schema(),
            &[
                SchemaEdit::SetPkey {
                    table: "users".into(),
                    column: "user_id".into(),
                },
                SchemaEdit::SetStype {
                    table: "items".into(),
                    column: "category".into(),
                    stype: SemanticType::Categorical,
                },
                SchemaEdit::AddLink {
                    src_table: "orders".into(),
                    fkey: "user_id".into(),
                    dst_table: "users".into(),
                },
                SchemaEdit::AddDerivedColumn {
                    table: "orders".into(),
                    name: "total".into(),
                    expr: "price * quantity".into(),
                },
            ],
        )
        .unwrap();
        assert_eq!(s.table("users").unwrap().primary_key.as_deref(), Some("user_id"));
        assert_eq!(
            s.table("items").unwrap().column("category").unwrap().stype,
            SemanticType::Categorical
        );
        assert_eq!(s.links.len(), 1);
        assert_eq!(
            s.table("orders").unwrap().stype_of("total"),
            Some(SemanticType::Numerical)
        );
    }

    #[test]
    fn link_to_table_without_pk_fails() {
        let err = override_schema(
            &schema(),
            &[SchemaEdit::AddLink {
                src_table: "orders".into(),
                fkey: "user_id".into(),
                dst_table: "users".into(),
            }],
        )
        .unwrap_err();
        assert!(matches!(err, SchemaError::LinkWithoutPrimaryKey { .. }));
    }

    #[test]
    fn derived_type_mismatch_fails() {
        let err = override_schema(
            &schema(),
            &[SchemaEdit::AddDerivedColumn {
                table: "orders".into(),
                name: "bad".into(),
                expr: "price * note".into(),
            }],
        )
        .unwrap_err();
        assert!(matches!(err, SchemaError::Derived { .. }));
    }

    #[test]
    fn unknown_target_fails() {
        assert!(override_schema(
            &schema(),
            &[SchemaEdit::SetStype {
                table: "nope".into(),
                column: "x".into(),
                stype: SemanticType::Text
            }]
        )
        .is_err());
    }

    #[test]
    fn edits_deserialize_from_json() {
        let edits: Vec<SchemaEdit> = serde_json::from_str(
            r#"[{"edit":"set_pkey","table":"users","column":"user_id"},
                {"edit":"add_derived_column","table":"orders","name":"total","expr":"price * quantity"}]"#,
        )
        .unwrap();
        assert_eq!(edits.len(), 2);
    }
}
