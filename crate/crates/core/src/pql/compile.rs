use serde::{Deserialize, Serialize};

use super::{pretty_print, AggFn, CmpOp, Ident, Literal, PqlError, QueryAst, Span, Target};
use crate::colstore::Column;
use crate::relgraph::{SemanticType, TemporalGraph};
use crate::time::parse_timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    Binary,
    Multiclass,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntitySpec {
    pub table: String,
    pub table_index: usize,
    pub column: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PredValue {
    Num(f64),
    Text(String),
    Time(i64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompiledPredicate {
    pub column: String,
    pub column_index: usize,
    pub op: CmpOp,
    pub value: PredValue,
}

impl CompiledPredicate {
    /// Null cells never satisfy a predicate.
    pub fn eval(&self, column: &Column, row: usize) -> bool {
        match &self.value {
            PredValue::Num(v) => column.f64_at(row).is_some_and(|x| self.op.apply(x, *v)),
            PredValue::Time(v) => column.time_at(row).is_some_and(|x| self.op.apply(x, *v)),
            PredValue::Text(v) => column.str_at(row).is_some_and(|x| self.op.apply(x, v.as_str())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LabelSpec {
    /// Aggregate over rows of `table` linked to the entity through link `link`,
    /// restricted to timestamps in `(t + window_start_ms, t + window_end_ms]`.
    Aggregate {
        func: AggFn,
        table: String,
        table_index: usize,
        column: Option<String>,
        column_index: Option<usize>,
        link: usize,
        window_start_ms: i64,
        window_end_ms: i64,
        filter: Vec<CompiledPredicate>,
        comparison: Option<(CmpOp, f64)>,
    },
    /// Stored value of an entity column.
    Static {
        column: String,
        column_index: usize,
        /// Truthy/falsy categorical column read as a binary label.
        boolean: bool,
    },
    /// Labels come with an explicit task table and cannot be recomputed.
    Provided,
}

/// A compiled query: task type, entity and how to compute labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPlan {
    pub query: String,
    pub task_type: TaskType,
    pub temporal: bool,
    pub entity: EntitySpec,
    pub label: LabelSpec,
    /// Class names. Binary plans use `["false", "true"]`; multiclass plans list the
    /// column's dictionary followed by the catch-all `"other"`; regression is empty.
    pub classes: Vec<String>,
}

pub const OTHER_CLASS: &str = "other";

impl TaskPlan {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Window length in milliseconds; 0 for static plans.
    pub fn window_len_ms(&self) -> i64 {
        match &self.label {
            LabelSpec::Aggregate {
                window_start_ms,
                window_end_ms,
                ..
            } => window_end_ms - window_start_ms,
            LabelSpec::Static { .. } | LabelSpec::Provided => 0,
        }
    }

    /// Window end offset in milliseconds; 0 for static plans.
    pub fn window_end_ms(&self) -> i64 {
        match &self.label {
            LabelSpec::Aggregate { window_end_ms, .. } => *window_end_ms,
            LabelSpec::Static { .. } | LabelSpec::Provided => 0,
        }
    }

    /// Class index of a categorical value, mapping unseen values to `"other"`.
    pub fn class_index(&self, value: &str) -> usize {
        self.classes[..self.classes.len().saturating_sub(1)]
            .iter()
            .position(|c| c == value)
            .unwrap_or(self.classes.len().saturating_sub(1))
    }

    /// Plan for a task table whose labels were supplied by the caller.
    pub fn provided(
        graph: &TemporalGraph,
        entity_table: usize,
        task_type: TaskType,
        classes: Vec<String>,
        temporal: bool,
    ) -> TaskPlan {
        let table = graph.table(entity_table);
        let column = table
            .primary_key_index()
            .map_or_else(String::new, |i| table.columns()[i].name.clone());
        TaskPlan {
            query: String::new(),
            task_type,
            temporal,
            entity: EntitySpec {
                table: table.name().to_string(),
                table_index: entity_table,
                column,
            },
            label: LabelSpec::Provided,
            classes,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}

pub(crate) fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "t" | "yes" | "y" | "1" => Some(true),
        "false" | "f" | "no" | "n" | "0" => Some(false),
        _ => None,
    }
}

fn err(span: Span, message: String) -> PqlError {
    PqlError::Compile { span, message }
}

fn table_of(graph: &TemporalGraph, id: &Ident) -> Result<usize, PqlError> {
    graph
        .table_index(&id.name)
        .ok_or_else(|| err(id.span, format!("unknown table '{}'", id.name)))
}

fn column_of(graph: &TemporalGraph, table: usize, id: &Ident) -> Result<usize, PqlError> {
    let t = graph.table(table);
    t.column_index(&id.name)
        .ok_or_else(|| err(id.span, format!("unknown column '{}.{}'", t.name(), id.name)))
}

fn numeric_literal(lit: &Literal, span: Span) -> Result<f64, PqlError> {
    lit.as_f64()
        .ok_or_else(|| err(span, format!("expected a numeric literal, found {lit}")))
}

/// Type-checks a query against a graph and infers the task type.
pub fn compile(ast: &QueryAst, graph: &TemporalGraph) -> Result<TaskPlan, PqlError> {
    let et = table_of(graph, &ast.entity.table)?;
    let entity_table = graph.table(et);
    let ec = column_of(graph, et, &ast.entity.column)?;
    if entity_table.primary_key_index() != Some(ec) {
        return Err(err(
            ast.entity.column.span,
            format!(
                "'{}.{}' is not the primary key of '{}'",
                ast.entity.table.name, ast.entity.column.name, ast.entity.table.name
            ),
        ));
    }
    let entity = EntitySpec {
        table: entity_table.name().to_string(),
        table_index: et,
        column: ast.entity.column.name.clone(),
    };
    let query = pretty_print(ast);
    match &ast.target {
        Target::Agg(a) => {
            let at = table_of(graph, &a.table)?;
            let agg_table = graph.table(at);
            if !agg_table.has_time() {
                return Err(err(
                    a.table.span,
                    format!("'{}' has no time column to window over", a.table.name),
                ));
            }
            let link = graph
                .schema()
                .links
                .iter()
                .position(|l| l.src_table == a.table.name && l.dst_table == entity.table)
                .ok_or_else(|| {
                    err(
                        a.table.span,
                        format!("no link from '{}' to '{}'", a.table.name, entity.table),
                    )
                })?;
            let column_index = match &a.column {
                Some(c) => {
                    let ci = column_of(graph, at, c)?;
                    if agg_table.columns()[ci].stype != SemanticType::Numerical {
                        return Err(err(
                            c.span,
                            format!(
                                "{} needs a numerical column, '{}' is {}",
                                a.func.as_str(),
                                c.name,
                                agg_table.columns()[ci].stype.as_str()
                            ),
                        ));
                    }
                    Some(ci)
                }
                None if a.func == AggFn::Count => None,
                None => {
                    return Err(err(
                        a.span,
                        format!("{} needs a numerical column, not '*'", a.func.as_str()),
                    ))
                }
            };
            let mut filter = Vec::with_capacity(a.filter.len());
            for p in &a.filter {
                if let Some(t) = &p.table {
                    if t.name != a.table.name {
                        return Err(err(
                            t.span,
                            format!("filter must reference '{}', found '{}'", a.table.name, t.name),
                        ));
                    }
                }
                let ci = column_of(graph, at, &p.column)?;
                let col = &agg_table.columns()[ci];
                let value = match col.stype {
                    SemanticType::Numerical => PredValue::Num(numeric_literal(&p.value, p.span)?),
                    SemanticType::Timestamp => match &p.value {
                        Literal::Str(s) => PredValue::Time(
                            parse_timestamp(s)
                                .ok_or_else(|| err(p.span, format!("cannot parse '{s}' as a timestamp")))?,
                        ),
                        Literal::Int(i) => PredValue::Time(*i),
                        other => return Err(err(p.span, format!("expected a timestamp, found {other}"))),
                    },
                    _ => {
                        if !matches!(p.op, CmpOp::Eq | CmpOp::Ne) {
                            return Err(err(
                                p.span,
                                format!("only = and != apply to {} columns", col.stype.as_str()),
                            ));
                        }
                        PredValue::Text(match &p.value {
                            Literal::Str(s) => s.clone(),
                            Literal::Int(i) => i.to_string(),
                            Literal::Float(f) => f.to_string(),
                            Literal::Bool(b) => b.to_string(),
                        })
                    }
                };
                filter.push(CompiledPredicate {
                    column: p.column.name.clone(),
                    column_index: ci,
                    op: p.op,
                    value,
                });
            }
            let comparison = match &ast.comparison {
                Some(c) => Some((c.op, numeric_literal(&c.value, c.span)?)),
                None => None,
            };
            let (task_type, classes) = if comparison.is_some() {
                (TaskType::Binary, vec!["false".to_string(), "true".to_string()])
            } else {
                (TaskType::Regression, Vec::new())
            };
            let unit = a.unit.millis();
            Ok(TaskPlan {
                query,
                task_type,
                temporal: true,
                entity,
                label: LabelSpec::Aggregate {
                    func: a.func,
                    table: a.table.name.clone(),
                    table_index: at,
                    column: a.column.as_ref().map(|c| c.name.clone()),
                    column_index,
                    link,
                    window_start_ms: a.start * unit,
                    window_end_ms: a.end * unit,
                    filter,
                    comparison,
                },
                classes,
            })
        }
        Target::Column(c) => {
            if c.table.name != entity.table {
                return Err(err(
                    c.table.span,
                    format!(
                        "static target must be a column of '{}', found '{}'",
                        entity.table, c.table.name
                    ),
                ));
            }
            let ci = column_of(graph, et, &c.column)?;
            if ci == ec {
                return Err(err(c.column.span, "cannot predict the primary key".into()));
            }
            let col = &entity_table.columns()[ci];
            let (task_type, boolean, classes) = match col.stype {
                SemanticType::Numerical => (TaskType::Regression, false, Vec::new()),
                SemanticType::Categorical => {
                    let dict = col.dictionary().expect("categorical columns are coded");
                    if !dict.is_empty() && dict.iter().all(|v| parse_bool(v).is_some()) {
                        (TaskType::Binary, true, vec!["false".into(), "true".into()])
                    } else {
                        let mut classes: Vec<String> = dict.iter().map(str::to_string).collect();
                        classes.push(OTHER_CLASS.to_string());
                        (TaskType::Multiclass, false, classes)
                    }
                }
                other => {
                    return Err(err(
                        c.column.span,
                        format!("cannot predict {} column '{}'", other.as_str(), c.column.name),
                    ))
                }
            };
            Ok(TaskPlan {
                query,
                task_type,
                temporal: false,
                entity,
                label: LabelSpec::Static {
                    column: c.column.name.clone(),
                    column_index: ci,
                    boolean,
                },
                classes,
            })
        }
    }
}
