use std::collections::HashMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::{DerivedExpr, RawTable, Schema, SchemaError, SemanticType};
use crate::colstore::{Buf, Column, IngestOptions};
use crate::time::{NEG_INF, UNKNOWN_TIME};

/// A record of one table: the node `v` of the temporal graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId {
    pub table: u32,
    pub row: u32,
}

impl NodeId {
    pub fn new(table: usize, row: usize) -> NodeId {
        NodeId {
            table: table as u32,
            row: row as u32,
        }
    }
}

#[derive(Debug)]
pub struct Table {
    name: String,
    columns: Vec<Column>,
    n_rows: usize,
    times: Buf<i64>,
    primary_key: Option<usize>,
    time_column: Option<usize>,
    pk_rows: OnceLock<HashMap<String, u32>>,
}

impl Clone for Table {
    fn clone(&self) -> Self {
        Table {
            name: self.name.clone(),
            columns: self.columns.clone(),
            n_rows: self.n_rows,
            times: self.times.clone(),
            primary_key: self.primary_key,
            time_column: self.time_column,
            pk_rows: OnceLock::new(),
        }
    }
}

impl Table {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn row_count(&self) -> usize {
        self.n_rows
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn primary_key(&self) -> Option<&Column> {
        self.primary_key.map(|i| &self.columns[i])
    }

    pub fn primary_key_index(&self) -> Option<usize> {
        self.primary_key
    }

    pub fn time_column_index(&self) -> Option<usize> {
        self.time_column
    }

    pub fn has_time(&self) -> bool {
        self.time_column.is_some()
    }

    /// Node timestamps; `NEG_INF` for dimension tables.
    pub fn times(&self) -> &[i64] {
        &self.times
    }

    pub(crate) fn times_buf(&self) -> &Buf<i64> {
        &self.times
    }

    /// Row holding the given primary-key value.
    pub fn row_of_key(&self, key: &str) -> Option<u32> {
        let pk = self.primary_key()?;
        let map = self.pk_rows.get_or_init(|| {
            (0..self.n_rows)
                .filter_map(|r| pk.str_at(r).map(|s| (s.to_string(), r as u32)))
                .collect()
        });
        map.get(key).copied()
    }

    pub fn key_of_row(&self, row: usize) -> Option<&str> {
        self.primary_key()?.str_at(row)
    }
}

/// The relational database viewed as a temporal heterogeneous graph. Immutable once
/// built.
#[derive(Debug, Clone)]
pub struct TemporalGraph {
    schema: Schema,
    tables: Vec<Table>,
}

impl TemporalGraph {
    /// Assembles a graph from materialized columns (raw columns followed by derived
    /// columns, in schema order).
    pub fn from_columns(schema: Schema, columns: Vec<Vec<Column>>) -> Result<TemporalGraph, SchemaError> {
        schema.validate()?;
        let mut tables = Vec::with_capacity(columns.len());
        for (meta, cols) in schema.tables.iter().zip(columns) {
            let n_rows = cols.first().map_or(0, Column::len);
            if let Some(bad) = cols.iter().find(|c| c.len() != n_rows) {
                return Err(SchemaError::Data {
                    table: meta.name.clone(),
                    message: format!("column '{}' has {} rows, expected {}", bad.name, bad.len(), n_rows),
                });
            }
            let time_column = meta
                .time_column
                .as_ref()
                .and_then(|n| cols.iter().position(|c| &c.name == n));
            let times: Vec<i64> = match time_column {
                Some(i) => (0..n_rows)
                    .map(|r| cols[i].time_at(r).unwrap_or(UNKNOWN_TIME))
                    .collect(),
                None => vec![NEG_INF; n_rows],
            };
            let primary_key = meta
                .primary_key
                .as_ref()
                .and_then(|n| cols.iter().position(|c| &c.name == n));
            tables.push(Table {
                name: meta.name.clone(),
                columns: cols,
                n_rows,
                times: Buf::Owned(times),
                primary_key,
                time_column,
                pk_rows: OnceLock::new(),
            });
        }
        let graph = TemporalGraph { schema, tables };
        graph.check_keys()?;
        Ok(graph)
    }

    pub(crate) fn from_loaded(schema: Schema, tables: Vec<(Vec<Column>, Buf<i64>)>) -> TemporalGraph {
        let tables = schema
            .tables
            .iter()
            .zip(tables)
            .map(|(meta, (columns, times))| {
                let pos = |n: &Option<String>| n.as_ref().and_then(|n| columns.iter().position(|c| &c.name == n));
                Table {
                    name: meta.name.clone(),
                    n_rows: times.len(),
                    primary_key: pos(&meta.primary_key),
                    time_column: pos(&meta.time_column),
                    columns,
                    times,
                    pk_rows: OnceLock::new(),
                }
            })
            .collect();
        TemporalGraph { schema, tables }
    }

    fn check_keys(&self) -> Result<(), SchemaError> {
        for t in &self.tables {
            if let Some(pk) = t.primary_key() {
                let mut seen = std::collections::HashSet::with_capacity(t.n_rows);
                let ok = (0..t.n_rows).all(|r| pk.code_at(r).is_some_and(|c| seen.insert(c)));
                if !ok {
                    return Err(SchemaError::PrimaryKeyNotUnique {
                        table: t.name.clone(),
                        column: pk.name.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn tables(&self) -> &[Table] {
        &self.tables
    }

    pub fn table(&self, i: usize) -> &Table {
        &self.tables[i]
    }

    pub fn table_index(&self, name: &str) -> Option<usize> {
        self.tables.iter().position(|t| t.name == name)
    }

    pub fn table_by_name(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn node_count(&self) -> usize {
        self.tables.iter().map(|t| t.n_rows).sum()
    }

    #[inline]
    pub fn node_time(&self, node: NodeId) -> i64 {
        self.tables[node.table as usize].times[node.row as usize]
    }

    /// Largest finite node timestamp, if any table has a time column.
    pub fn max_time(&self) -> Option<i64> {
        self.tables
            .iter()
            .flat_map(|t| t.times.iter().copied())
            .filter(|&t| t != NEG_INF && t != UNKNOWN_TIME)
            .max()
    }

    pub fn min_time(&self) -> Option<i64> {
        self.tables
            .iter()
            .flat_map(|t| t.times.iter().copied())
            .filter(|&t| t != NEG_INF && t != UNKNOWN_TIME)
            .min()
    }

    /// Global dense index of a node (tables laid out in schema order).
    pub fn global_index(&self, node: NodeId) -> usize {
        self.tables[..node.table as usize]
            .iter()
            .map(|t| t.n_rows)
            .sum::<usize>()
            + node.row as usize
    }

    /// Copy of the graph without any row whose timestamp is after `t`. Dictionaries are
    /// preserved, so surviving cells keep their codes.
    pub fn truncate_after(&self, t: i64) -> TemporalGraph {
        let tables = self
            .tables
            .iter()
            .map(|tab| {
                let keep: Vec<usize> = (0..tab.n_rows).filter(|&r| tab.times[r] <= t).collect();
                Table {
                    name: tab.name.clone(),
                    columns: tab.columns.iter().map(|c| c.filter_rows(&keep)).collect(),
                    n_rows: keep.len(),
                    times: Buf::Owned(keep.iter().map(|&r| tab.times[r]).collect()),
                    primary_key: tab.primary_key,
                    time_column: tab.time_column,
                    pk_rows: OnceLock::new(),
                }
            })
            .collect();
        TemporalGraph {
            schema: self.schema.clone(),
            tables,
        }
    }

    /// Copy of the graph with an extra column appended to table `table`.
    pub fn with_extra_column(&self, table: usize, column: Column) -> Result<TemporalGraph, SchemaError> {
        let mut g = self.clone();
        let t = &mut g.tables[table];
        if column.len() != t.n_rows {
            return Err(SchemaError::Data {
                table: t.name.clone(),
                message: format!("extra column '{}' has wrong length", column.name),
            });
        }
        if t.column(&column.name).is_some() {
            return Err(SchemaError::DuplicateColumn {
                table: t.name.clone(),
                column: column.name.clone(),
            });
        }
        g.schema.tables[table].columns.push(super::ColumnMeta {
            name: column.name.clone(),
            stype: column.stype,
        });
        // Derived columns stay last in the column list.
        let n_raw = g.schema.tables[table].columns.len() - 1;
        t.columns.insert(n_raw, column);
        Ok(g)
    }
}

/// Builds the temporal graph: parses every declared column, materializes derived
/// columns and assigns node timestamps.
pub fn build_graph(schema: &Schema, data: &[RawTable]) -> Result<TemporalGraph, SchemaError> {
    build_graph_with(schema, data, &IngestOptions::default()).map(|(g, _)| g)
}

pub(crate) fn build_graph_with(
    schema: &Schema,
    data: &[RawTable],
    opts: &IngestOptions,
) -> Result<(TemporalGraph, Vec<crate::colstore::TableReport>), SchemaError> {
    schema.validate()?;
    let mut columns = Vec::with_capacity(schema.tables.len());
    let mut reports = Vec::with_capacity(schema.tables.len());
    for meta in &schema.tables {
        let raw = data
            .iter()
            .find(|r| r.name == meta.name)
            .ok_or_else(|| SchemaError::UnknownTable(meta.name.clone()))?;
        let (cols, report) = crate::colstore::chunks_from_raw(meta, raw, opts)?;
        columns.push(cols);
        reports.push(report);
    }
    Ok((TemporalGraph::from_columns(schema.clone(), columns)?, reports))
}

/// Evaluates derived expressions of `meta` over already-parsed raw columns.
pub(crate) fn materialize_derived(
    meta: &super::TableMeta,
    columns: &[Column],
    n_rows: usize,
) -> Result<Vec<Column>, SchemaError> {
    let mut out = Vec::new();
    for d in &meta.derived_columns {
        let expr = DerivedExpr::parse(&d.expr)
            .and_then(|e| e.check(meta).map(|_| e))
            .map_err(|source| SchemaError::Derived {
                table: meta.name.clone(),
                column: d.name.clone(),
                source,
            })?;
        let values: Vec<Option<f64>> = (0..n_rows)
            .map(|r| {
                expr.eval(&|name| {
                    columns
                        .iter()
                        .find(|c| c.name == name && c.stype == SemanticType::Numerical)
                        .and_then(|c| c.f64_at(r))
                })
            })
            .collect();
        out.push(Column::from_f64(&d.name, &values));
    }
    Ok(out)
}
