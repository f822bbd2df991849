use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ColstoreError, Column};
use crate::relgraph::{
    infer_schema, override_schema, ColumnMeta, RawColumn, RawTable, SchemaEdit, SchemaError, SemanticType, TableMeta,
};
use crate::time::parse_timestamp;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestOptions {
    /// Largest tolerated fraction of non-empty timestamp cells that fail to parse.
    pub max_timestamp_failure_ratio: f64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            max_timestamp_failure_ratio: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnReport {
    pub name: String,
    pub stype: SemanticType,
    pub nulls: usize,
    /// Non-empty cells that failed to parse and were stored as null.
    pub malformed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableReport {
    pub table: String,
    pub rows: usize,
    pub columns: Vec<ColumnReport>,
    pub warnings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub src_table: String,
    pub fkey_column: String,
    pub dst_table: String,
    pub edges: u64,
    pub dangling: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub tables: Vec<TableReport>,
    pub links: Vec<LinkReport>,
}

/// Parses one declared column from raw cells. Malformed numerical or timestamp cells
/// become nulls and are counted; too many bad timestamps is an error.
pub fn parse_column(
    table: &str,
    meta: &ColumnMeta,
    values: &[Option<String>],
    opts: &IngestOptions,
) -> Result<(Column, ColumnReport), SchemaError> {
    let mut malformed = 0usize;
    let column = match meta.stype {
        SemanticType::Numerical => {
            let parsed: Vec<Option<f64>> = values
                .iter()
                .map(|v| {
                    v.as_ref().and_then(|s| {
                        let p = s.trim().parse::<f64>().ok().filter(|x| x.is_finite());
                        if p.is_none() {
                            malformed += 1;
                        }
                        p
                    })
                })
                .collect();
            Column::from_f64(&meta.name, &parsed)
        }
        SemanticType::Timestamp => {
            let parsed: Vec<Option<i64>> = values
                .iter()
                .map(|v| {
                    v.as_ref().and_then(|s| {
                        let p = parse_timestamp(s);
                        if p.is_none() {
                            malformed += 1;
                        }
                        p
                    })
                })
                .collect();
            let present = values.iter().filter(|v| v.is_some()).count();
            if present > 0 && malformed as f64 / present as f64 > opts.max_timestamp_failure_ratio {
                return Err(SchemaError::Data {
                    table: table.to_string(),
                    message: format!(
                        "timestamp column '{}': {} of {} cells unparseable",
                        meta.name, malformed, present
                    ),
                });
            }
            Column::from_times(&meta.name, &parsed)
        }
        stype => Column::from_strings(&meta.name, stype, values),
    };
    let report = ColumnReport {
        name: meta.name.clone(),
        stype: meta.stype,
        nulls: column.valid.null_count(),
        malformed,
    };
    Ok((column, report))
}

/// Parses the declared columns of a raw table and materializes derived columns.
pub fn chunks_from_raw(
    meta: &TableMeta,
    raw: &RawTable,
    opts: &IngestOptions,
) -> Result<(Vec<Column>, TableReport), SchemaError> {
    let n_rows = raw.row_count();
    let mut columns = Vec::with_capacity(meta.columns.len() + meta.derived_columns.len());
    let mut reports = Vec::new();
    for cm in &meta.columns {
        let rc = raw.column(&cm.name).ok_or_else(|| SchemaError::UnknownColumn {
            table: meta.name.clone(),
            column: cm.name.clone(),
        })?;
        if rc.values.len() != n_rows {
            return Err(SchemaError::Data {
                table: meta.name.clone(),
                message: format!("column '{}' has {} rows, expected {}", cm.name, rc.values.len(), n_rows),
            });
        }
        let (col, rep) = parse_column(&meta.name, cm, &rc.values, opts)?;
        columns.push(col);
        reports.push(rep);
    }
    let derived = crate::relgraph::graph_support::materialize_derived(meta, &columns, n_rows)?;
    for d in &derived {
        reports.push(ColumnReport {
            name: d.name.clone(),
            stype: SemanticType::Numerical,
            nulls: d.valid.null_count(),
            malformed: 0,
        });
    }
    columns.extend(derived);
    let warnings = reports.iter().map(|r| r.malformed).sum();
    Ok((
        columns,
        TableReport {
            table: meta.name.clone(),
            rows: n_rows,
            columns: reports,
            warnings,
        },
    ))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ColstoreError + '_ {
    move |source| ColstoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads a UTF-8, RFC-4180 CSV file with a header row into raw string cells. Empty
/// cells are nulls.
pub fn read_raw_csv(path: &Path, table: &str) -> Result<RawTable, ColstoreError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let csv_err = |e: csv::Error| ColstoreError::Csv {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let headers: Vec<String> = rdr
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut columns: Vec<RawColumn> = headers
        .iter()
        .map(|h| RawColumn {
            name: h.clone(),
            values: Vec::new(),
        })
        .collect();
    for record in rdr.records() {
        let record = record.map_err(csv_err)?;
        for (col, cell) in columns.iter_mut().zip(record.iter()) {
            col.values.push((!cell.is_empty()).then(|| cell.to_string()));
        }
    }
    Ok(RawTable {
        name: table.to_string(),
        columns,
    })
}

/// Reads one CSV file against a declared table layout.
pub fn ingest_csv(
    path: &Path,
    meta: &TableMeta,
    opts: &IngestOptions,
) -> Result<(Vec<Column>, TableReport), ColstoreError> {
    let raw = read_raw_csv(path, &meta.name)?;
    for c in &meta.columns {
        if raw.column(&c.name).is_none() {
            return Err(ColstoreError::MissingColumn {
                path: path.display().to_string(),
                column: c.name.clone(),
            });
        }
    }
    Ok(chunks_from_raw(meta, &raw, opts)?)
}

/// Ingests every `*.csv` file of a directory (table name = file stem, sorted by name):
/// infers the schema, applies overrides, builds the graph and its adjacency.
pub fn ingest_dir(
    dir: &Path,
    edits: &[SchemaEdit],
    opts: &IngestOptions,
) -> Result<(super::Store, IngestReport), ColstoreError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(ColstoreError::EmptyDirectory(dir.display().to_string()));
    }
    let raw: Vec<RawTable> = paths
        .iter()
        .map(|p| {
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            read_raw_csv(p, &name)
        })
        .collect::<Result<_, _>>()?;
    let schema = override_schema(&infer_schema(&raw)?, edits)?;
    let (graph, tables) = crate::relgraph::graph_support::build_graph_with(&schema, &raw, opts)?;
    let index = super::build_adjacency(&graph);
    let links = schema
        .links
        .iter()
        .enumerate()
        .map(|(i, l)| LinkReport {
            src_table: l.src_table.clone(),
            fkey_column: l.fkey_column.clone(),
            dst_table: l.dst_table.clone(),
            edges: index.forward_edge_count(i),
            dangling: index.dangling(i),
        })
        .collect();
    Ok((super::Store::new(graph, index), IngestReport { tables, links }))
}
