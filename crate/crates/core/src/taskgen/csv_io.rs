use std::io::{Read, Write};

use super::{TaskRow, TaskgenError};
use crate::pql::{parse_bool, TaskType, OTHER_CLASS};
use crate::relgraph::TemporalGraph;
use crate::time::{format_timestamp, parse_timestamp};

/// Column names of an explicit task table.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskColumns {
    pub entity: String,
    pub time: Option<String>,
    pub target: Option<String>,
}

/// A task-table row as read from CSV: resolved entity row, anchor and raw target text.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTaskRow {
    pub entity: u32,
    pub anchor: i64,
    pub target: Option<String>,
}

fn csv_err(path: &str, message: impl ToString) -> TaskgenError {
    TaskgenError::Csv {
        path: path.to_string(),
        message: message.to_string(),
    }
}

/// Reads a task table. Entity keys resolve through the entity table's primary key;
/// rows without a time column take `default_anchor`.
pub fn import_csv<R: Read>(
    reader: R,
    path: &str,
    graph: &TemporalGraph,
    entity_table: usize,
    columns: &TaskColumns,
    default_anchor: Option<i64>,
) -> Result<Vec<RawTaskRow>, TaskgenError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| csv_err(path, format!("missing column '{name}'")))
    };
    let ei = find(&columns.entity)?;
    let ti = columns.time.as_deref().map(find).transpose()?;
    let yi = columns.target.as_deref().map(find).transpose()?;
    let table = graph.table(entity_table);
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let key = rec.get(ei).unwrap_or("");
        let entity = table
            .row_of_key(key)
            .ok_or_else(|| TaskgenError::UnknownEntityKey(key.to_string()))?;
        let anchor = match ti {
            Some(i) => {
                let cell = rec.get(i).unwrap_or("");
                parse_timestamp(cell)
                    .ok_or_else(|| csv_err(path, format!("row {}: bad timestamp '{cell}'", line + 2)))?
            }
            None => default_anchor.ok_or_else(|| csv_err(path, "no time column and no default anchor time"))?,
        };
        let target = yi
            .and_then(|i| rec.get(i))
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string);
        out.push(RawTaskRow { entity, anchor, target });
    }
    Ok(out)
}

/// Task type implied by raw target values: all boolean-like → binary, all numeric →
/// regression, otherwise multiclass.
pub fn infer_task_type(targets: &[&str]) -> TaskType {
    if !targets.is_empty() && targets.iter().all(|t| parse_bool(t).is_some()) {
        TaskType::Binary
    } else if targets.iter().all(|t| t.parse::<f64>().is_ok()) {
        TaskType::Regression
    } else {
        TaskType::Multiclass
    }
}

/// Converts raw targets into numeric labels, returning the class list (binary:
/// `["false", "true"]`; multiclass: first-occurrence order plus `"other"`).
pub fn rows_from_raw(raw: &[RawTaskRow], task_type: TaskType) -> (Vec<TaskRow>, Vec<String>) {
    let classes: Vec<String> = match task_type {
        TaskType::Binary => vec!["false".into(), "true".into()],
        TaskType::Regression => Vec::new(),
        TaskType::Multiclass => {
            let mut c: Vec<String> = Vec::new();
            for r in raw {
                if let Some(t) = &r.target {
                    if !c.contains(t) {
                        c.push(t.clone());
                    }
                }
            }
            c.push(OTHER_CLASS.into());
            c
        }
    };
    let rows = raw
        .iter()
        .map(|r| {
            let target = r.target.as_deref().and_then(|t| match task_type {
                TaskType::Binary => parse_bool(t).map(|b| b as u8 as f64),
                TaskType::Regression => t.parse::<f64>().ok(),
                TaskType::Multiclass => Some(
                    classes[..classes.len() - 1]
                        .iter()
                        .position(|c| c == t)
                        .unwrap_or(classes.len() - 1) as f64,
                ),
            });
            TaskRow::new(r.entity, r.anchor, target)
        })
        .collect();
    (rows, classes)
}

/// Writes rows as CSV with the given column names. Class labels are written by name.
pub fn export_csv<W: Write>(
    writer: W,
    rows: &[TaskRow],
    graph: &TemporalGraph,
    entity_table: usize,
    columns: &TaskColumns,
    classes: &[String],
) -> Result<(), TaskgenError> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| csv_err("<output>", e);
    let time = columns.time.as_deref().unwrap_or("anchor_time");
    let target = columns.target.as_deref().unwrap_or("target");
    w.write_record([columns.entity.as_str(), time, target]).map_err(err)?;
    let table = graph.table(entity_table);
    for r in rows {
        let key = table.key_of_row(r.entity as usize).unwrap_or("");
        let y = match r.target {
            None => String::new(),
            Some(v) if !classes.is_empty() => classes.get(v as usize).cloned().unwrap_or_else(|| v.to_string()),
            Some(v) => format!("{v}"),
        };
        w.write_record([key, &format_timestamp(r.anchor), &y]).map_err(err)?;
    }
    w.flush().map_err(|e| csv_err("<output>", e))?;
    Ok(())
}
