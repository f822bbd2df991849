//! Deep-feature-synthesis flattening and a logistic-regression scorer: the fixed
//! column-wise aggregation pipeline the relational model is compared against.

use std::collections::HashMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colstore::{ColstoreError, ColumnData, EdgeType, NeighborAccess};
use crate::pql::{LabelSpec, TaskPlan};
use crate::relgraph::{NodeId, SemanticType, TemporalGraph};
use crate::time::MS_PER_DAY;
use crate::util::rng_for;

#[cfg(test)]
mod tests;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("depth must be 1 or 2, got {0}")]
    Depth(usize),
    #[error("unknown table index {0}")]
    UnknownTable(usize),
    #[error("entity {entity} out of range for table '{table}' with {rows} rows")]
    UnknownEntity { table: String, entity: u32, rows: usize },
    #[error("{rows} rows but {labels} labels")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("row has {found} features, expected {expected}")]
    Width { expected: usize, found: usize },
    #[error("labels must be 0 or 1, found {0}")]
    Label(f64),
    #[error(transparent)]
    Store(#[from] ColstoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Agg {
    Sum,
    Mean,
    Min,
    Max,
    CountDistinct,
    ModeFrequency,
}

impl Agg {
    fn as_str(self) -> &'static str {
        match self {
            Agg::Sum => "SUM",
            Agg::Mean => "MEAN",
            Agg::Min => "MIN",
            Agg::Max => "MAX",
            Agg::CountDistinct => "COUNT_DISTINCT",
            Agg::ModeFrequency => "MODE_FREQ",
        }
    }
}

#[derive(Debug, Clone)]
struct PathFeatures {
    path: Vec<EdgeType>,
    table: usize,
    /// (column, aggregation) pairs after the leading COUNT.
    columns: Vec<(usize, Agg)>,
}

/// The deterministic feature layout of an entity table at a given depth.
#[derive(Debug, Clone)]
pub struct FlatSpec {
    entity_table: usize,
    depth: usize,
    root_columns: Vec<usize>,
    paths: Vec<PathFeatures>,
    names: Vec<String>,
}

/// One flattened example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatRow {
    pub entity: u32,
    pub anchor: i64,
    /// `None` marks an undefined aggregate (empty set) or a missing root cell.
    pub values: Vec<Option<f64>>,
}

fn link_label(graph: &TemporalGraph, et: EdgeType) -> String {
    let link = &graph.schema().links[et.link()];
    if et.is_reverse() {
        format!("{}<{}", link.src_table, link.fkey_column)
    } else {
        format!("{}>{}", link.dst_table, link.fkey_column)
    }
}

fn edge_types_from(graph: &TemporalGraph, table: usize) -> Vec<(EdgeType, usize)> {
    let mut out = Vec::new();
    for (i, l) in graph.schema().links.iter().enumerate() {
        let src = graph.table_index(&l.src_table).expect("validated schema");
        let dst = graph.table_index(&l.dst_table).expect("validated schema");
        if src == table {
            out.push((EdgeType::new(i, false), dst));
        }
        if dst == table {
            out.push((EdgeType::new(i, true), src));
        }
    }
    out
}

fn is_key(graph: &TemporalGraph, table: usize, column: usize) -> bool {
    graph.table(table).columns()[column].stype == SemanticType::Identifier
}

impl FlatSpec {
    /// Layout for `entity_table` with link paths up to `depth` hops. Columns listed in
    /// `excluded` (of the entity table) are never read.
    pub fn new(
        graph: &TemporalGraph,
        entity_table: usize,
        depth: usize,
        excluded: &[usize],
    ) -> Result<FlatSpec, BaselineError> {
        if !(1..=2).contains(&depth) {
            return Err(BaselineError::Depth(depth));
        }
        if entity_table >= graph.tables().len() {
            return Err(BaselineError::UnknownTable(entity_table));
        }
        let et_name = graph.table(entity_table).name().to_string();
        let mut names = Vec::new();
        let root_columns: Vec<usize> = graph
            .table(entity_table)
            .columns()
            .iter()
            .enumerate()
            .filter(|(c, col)| {
                !is_key(graph, entity_table, *c) && !excluded.contains(c) && col.stype != SemanticType::Text
            })
            .map(|(c, _)| c)
            .collect();
        for &c in &root_columns {
            names.push(format!("{et_name}.{}", graph.table(entity_table).columns()[c].name));
        }
        let mut paths = Vec::new();
        let mut frontier: Vec<(Vec<EdgeType>, usize)> = vec![(Vec::new(), entity_table)];
        for _ in 0..depth {
            let mut next = Vec::new();
            for (path, table) in &frontier {
                for (et, to) in edge_types_from(graph, *table) {
                    if path.last().is_some_and(|&last: &EdgeType| last.reversed() == et) {
                        continue;
                    }
                    let mut p = path.clone();
                    p.push(et);
                    next.push((p, to));
                }
            }
            for (path, table) in &next {
                let label: Vec<String> = path.iter().map(|&et| link_label(graph, et)).collect();
                let label = label.join("/");
                names.push(format!("{label}:COUNT"));
                let mut columns = Vec::new();
                for (c, col) in graph.table(*table).columns().iter().enumerate() {
                    let aggs: &[Agg] = match col.stype {
                        SemanticType::Numerical => &[Agg::Sum, Agg::Mean, Agg::Min, Agg::Max],
                        SemanticType::Categorical => &[Agg::CountDistinct, Agg::ModeFrequency],
                        _ => &[],
                    };
                    for &a in aggs {
                        names.push(format!("{label}:{}:{}", col.name, a.as_str()));
                        columns.push((c, a));
                    }
                }
                paths.push(PathFeatures {
                    path: path.clone(),
                    table: *table,
                    columns,
                });
            }
            frontier = next;
        }
        Ok(FlatSpec {
            entity_table,
            depth,
            root_columns,
            paths,
            names,
        })
    }

    /// Layout for a task: the plan's entity table, excluding a static target column.
    pub fn for_plan(graph: &TemporalGraph, plan: &TaskPlan, depth: usize) -> Result<FlatSpec, BaselineError> {
        let excluded = match &plan.label {
            LabelSpec::Static { column_index, .. } => vec![*column_index],
            LabelSpec::Aggregate { .. } | LabelSpec::Provided => Vec::new(),
        };
        FlatSpec::new(graph, plan.entity.table_index, depth, &excluded)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn width(&self) -> usize {
        self.names.len()
    }
}

fn root_value(graph: &TemporalGraph, table: usize, column: usize, row: usize, anchor: i64) -> Option<f64> {
    let col = &graph.table(table).columns()[column];
    if !col.is_valid(row) {
        return None;
    }
    match &col.data {
        ColumnData::Float(v) => Some(v[row]).filter(|x| x.is_finite()),
        ColumnData::Time(v) => Some((anchor - v[row]) as f64 / MS_PER_DAY as f64),
        ColumnData::Codes { codes, .. } => Some(f64::from(codes[row])),
    }
}

/// Flattens one entity at `anchor`: root columns, then per link path a row COUNT and
/// column aggregates over rows with timestamp `<= anchor`.
pub fn dfs_flatten<A: NeighborAccess + ?Sized>(
    access: &A,
    spec: &FlatSpec,
    entity: u32,
    anchor: i64,
) -> Result<FlatRow, BaselineError> {
    let graph = access.graph();
    let table = graph.table(spec.entity_table);
    if entity as usize >= table.row_count() {
        return Err(BaselineError::UnknownEntity {
            table: table.name().to_string(),
            entity,
            rows: table.row_count(),
        });
    }
    let root = NodeId::new(spec.entity_table, entity as usize);
    access.note_input(root);
    let mut values = Vec::with_capacity(spec.width());
    for &c in &spec.root_columns {
        values.push(root_value(graph, spec.entity_table, c, entity as usize, anchor));
    }
    let index = access.index();
    let mut cache: HashMap<Vec<EdgeType>, Vec<NodeId>> = HashMap::new();
    cache.insert(Vec::new(), vec![root]);
    for pf in &spec.paths {
        let prefix = &pf.path[..pf.path.len() - 1];
        let last = *pf.path.last().expect("non-empty path");
        let parents = cache.get(prefix).expect("prefixes come first").clone();
        let mut rows = Vec::new();
        for p in parents {
            for (n, _) in index.recent_before(p, last, anchor)? {
                access.note_input(n);
                rows.push(n);
            }
        }
        values.push(Some(rows.len() as f64));
        let t = graph.table(pf.table);
        for &(c, agg) in &pf.columns {
            let col = &t.columns()[c];
            let v = match agg {
                Agg::CountDistinct | Agg::ModeFrequency => {
                    let mut counts: HashMap<u32, usize> = HashMap::new();
                    for n in &rows {
                        if let Some(code) = col.code_at(n.row as usize) {
                            *counts.entry(code).or_default() += 1;
                        }
                    }
                    if counts.is_empty() {
                        None
                    } else if agg == Agg::CountDistinct {
                        Some(counts.len() as f64)
                    } else {
                        Some(*counts.values().max().expect("non-empty") as f64)
                    }
                }
                _ => {
                    let xs: Vec<f64> = rows
                        .iter()
                        .filter_map(|n| col.f64_at(n.row as usize))
                        .filter(|x| x.is_finite())
                        .collect();
                    if xs.is_empty() {
                        None
                    } else {
                        Some(match agg {
                            Agg::Sum => xs.iter().sum(),
                            Agg::Mean => xs.iter().sum::<f64>() / xs.len() as f64,
                            Agg::Min => xs.iter().copied().fold(f64::INFINITY, f64::min),
                            _ => xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                        })
                    }
                }
            };
            values.push(v);
        }
        cache.insert(pf.path.clone(), rows);
    }
    Ok(FlatRow { entity, anchor, values })
}

/// Writes a CSV with header `entity,anchor_time,<feature names>`; null cells are empty.
pub fn write_flat_csv(w: impl Write, spec: &FlatSpec, rows: &[FlatRow]) -> Result<(), BaselineError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["entity".to_string(), "anchor_time".to_string()];
    header.extend(spec.names().iter().cloned());
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.entity.to_string(), r.anchor.to_string()];
        rec.extend(r.values.iter().map(|v| v.map(|x| format!("{x:?}")).unwrap_or_default()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Logistic regression on flattened rows. Inputs are standardized with training
/// statistics; every feature gets a presence indicator and nulls are imputed as 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Weights over `[standardized values.., presence indicators..]`.
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearModel {
    fn design(&self, values: &[Option<f64>]) -> Vec<f64> {
        let k = self.mean.len();
        let mut x = vec![0.0; 2 * k];
        for (j, v) in values.iter().enumerate() {
            if let Some(v) = v {
                x[j] = (v - self.mean[j]) / self.scale[j];
                x[k + j] = 1.0;
            }
        }
        x
    }

    /// Logit of the positive class.
    pub fn score(&self, row: &FlatRow) -> Result<f64, BaselineError> {
        if row.values.len() != self.mean.len() {
            return Err(BaselineError::Width {
                expected: self.mean.len(),
                found: row.values.len(),
            });
        }
        let x = self.design(&row.values);
        Ok(self.bias + x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>())
    }
}

/// Full-batch gradient descent on the mean logistic loss. The seed sets the small
/// random initial weights.
pub fn linear_fit(
    rows: &[FlatRow],
    labels: &[f64],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<LinearModel, BaselineError> {
    if rows.len() != labels.len() {
        return Err(BaselineError::LengthMismatch {
            rows: rows.len(),
            labels: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(BaselineError::Label(bad));
    }
    let k = rows.first().map_or(0, |r| r.values.len());
    if let Some(r) = rows.iter().find(|r| r.values.len() != k) {
        return Err(BaselineError::Width {
            expected: k,
            found: r.values.len(),
        });
    }
    let mut mean = vec![0.0; k];
    let mut scale = vec![1.0; k];
    for j in 0..k {
        let xs: Vec<f64> = rows.iter().filter_map(|r| r.values[j]).collect();
        if xs.is_empty() {
            continue;
        }
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
        mean[j] = m;
        if var > 0.0 {
            scale[j] = var.sqrt();
        }
    }
    let mut rng = rng_for(&[seed, 0x11EA]);
    let mut model = LinearModel {
        mean,
        scale,
        weights: (0..2 * k).map(|_| rng.gen_range(-0.01..0.01)).collect(),
        bias: 0.0,
    };
    let design: Vec<Vec<f64>> = rows.iter().map(|r| model.design(&r.values)).collect();
    let n = rows.len().max(1) as f64;
    for _ in 0..epochs {
        let mut gw = vec![0.0; 2 * k];
        let mut gb = 0.0;
        for (x, &y) in design.iter().zip(labels) {
            let z = model.bias + x.iter().zip(&model.weights).map(|(a, b)| a * b).sum::<f64>();
            let p = 1.0 / (1.0 + (-z).exp());
            let e = (p - y) / n;
            gb += e;
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += e * xi;
            }
        }
        model.bias -= lr * gb;
        for (w, g) in model.weights.iter_mut().zip(&gw) {
            *w -= lr * g;
        }
    }
    Ok(model)
}

/// Logit of the positive class for one row.
pub fn linear_predict(model: &LinearModel, row: &FlatRow) -> Result<f64, BaselineError> {
    model.score(row)
}
