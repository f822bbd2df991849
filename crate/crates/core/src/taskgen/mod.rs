//! Automatic context generation: leakage-safe labels from replayed history and task
//! tables mixing local (same entity, earlier windows) and global (other entities,
//! recent snapshots) examples.

mod csv_io;
mod label;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colstore::{ColstoreError, EdgeType, NeighborAccess};
use crate::pql::{LabelSpec, TaskPlan, TaskType};
use crate::time::{NEG_INF, UNKNOWN_TIME};
use crate::util::{hash_str, hash_words, rng_for};

pub use csv_io::{export_csv, import_csv, infer_task_type, rows_from_raw, RawTaskRow, TaskColumns};
pub use label::compute_label;
pub(crate) use label::{label_audited, Audit};

#[derive(Debug, Error)]
pub enum TaskgenError {
    #[error("entity row {0} does not exist")]
    EntityNotFound(u32),
    #[error("entity key '{0}' not found")]
    UnknownEntityKey(String),
    #[error("insufficient history: the most recent context anchor {anchor} precedes the first event at {first_event}")]
    InsufficientHistory { anchor: i64, first_event: i64 },
    #[error("entity table '{0}' is empty")]
    EmptyEntityTable(String),
    #[error("no labeled context rows could be generated")]
    EmptyContext,
    #[error("degenerate split: {0}")]
    Degenerate(String),
    #[error("the plan's labels come from a task table and cannot be computed")]
    NoLabelRule,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("task table CSV {path}: {message}")]
    Csv { path: String, message: String },
    #[error(transparent)]
    Store(#[from] ColstoreError),
}

/// One (entity, anchor, target) example. `entity` is a row of the entity table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub entity: u32,
    pub anchor: i64,
    pub target: Option<f64>,
    /// Labels of the same entity at the previous non-overlapping windows, most recent
    /// first, `None` where the label is undefined.
    pub lags: Vec<Option<f64>>,
}

impl TaskRow {
    pub fn new(entity: u32, anchor: i64, target: Option<f64>) -> TaskRow {
        TaskRow {
            entity,
            anchor,
            target,
            lags: Vec::new(),
        }
    }
}

/// Context examples with known targets plus prediction rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTable {
    pub task_type: TaskType,
    pub entity_table: usize,
    pub classes: Vec<String>,
    pub lag_timesteps: usize,
    pub context: Vec<TaskRow>,
    pub predict: Vec<TaskRow>,
}

impl TaskTable {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextConfig {
    /// Maximum number of context rows.
    pub budget: usize,
    /// Share of the budget reserved for the prediction entities' own history.
    pub local_fraction: f64,
    pub lag_timesteps: usize,
    /// Number of most recent snapshots global examples are drawn from (extended
    /// backwards when they hold too few candidates).
    pub snapshots: usize,
    pub seed: u64,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig {
            budget: 10_000,
            local_fraction: 0.25,
            lag_timesteps: 0,
            snapshots: 4,
            seed: 0,
        }
    }
}

/// Random-order key of an (entity, anchor) candidate. Derived from the entity's key
/// rather than its row number, so deleting unrelated rows leaves the draw unchanged.
fn draw_key(seed: u64, key: Option<&str>, anchor: i64, row: u32) -> (u64, u32) {
    let k = key.map_or(row as u64, hash_str);
    (hash_words(&[seed, 0x610B, k, anchor as u64]), row)
}

/// Largest number of snapshots searched when filling the global share.
const MAX_SNAPSHOTS: usize = 256;

/// Context anchors of a temporal plan: `a_k = t - max(end, w) - (k - 1) w`, so every
/// label window ends at or before `t` and consecutive windows do not overlap.
pub fn context_anchors(plan: &TaskPlan, anchor_t: i64, k: usize) -> Vec<i64> {
    let w = plan.window_len_ms();
    let first = anchor_t - plan.window_end_ms().max(w);
    (0..k as i64).map(|i| first - i * w).collect()
}

/// Lag labels for a row at `anchor`: labels at the `lags` previous context anchors.
pub(crate) fn lag_values<A: NeighborAccess + ?Sized>(
    access: &A,
    plan: &TaskPlan,
    entity: u32,
    anchor: i64,
    lags: usize,
) -> Result<Vec<Option<f64>>, TaskgenError> {
    context_anchors(plan, anchor, lags)
        .into_iter()
        .map(|a| label_audited(access, plan, entity, a, Audit::Input))
        .collect()
}

/// Earliest linked event of an entity under an aggregate plan, if any.
fn first_event<A: NeighborAccess + ?Sized>(access: &A, link: usize, entity: u32) -> Option<i64> {
    let csr = access.index().csr(EdgeType::new(link, true));
    let (lo, hi) = csr.range(entity as usize);
    (lo < hi).then(|| csr.times()[lo]).filter(|&t| t != UNKNOWN_TIME)
}

/// Builds a task table for `entities` (rows of the plan's entity table) at `anchor_t`.
///
/// Temporal plans: local rows are the prediction entities at earlier context anchors,
/// filled round-robin up to `budget * local_fraction`; the rest of the budget is drawn
/// uniformly (seeded) from (entity, anchor) pairs at the most recent context anchors,
/// over entities with at least one event at or before that anchor. Rows with an
/// undefined label are skipped. Static plans draw labeled entities visible at
/// `anchor_t` other than the prediction entities. Context rows are sorted by
/// (entity, anchor).
pub fn generate_context<A: NeighborAccess + ?Sized>(
    access: &A,
    plan: &TaskPlan,
    anchor_t: i64,
    entities: &[u32],
    config: &ContextConfig,
) -> Result<TaskTable, TaskgenError> {
    if !(0.0..=1.0).contains(&config.local_fraction) {
        return Err(TaskgenError::Config(format!(
            "local fraction {} outside [0, 1]",
            config.local_fraction
        )));
    }
    let graph = access.graph();
    let et = plan.entity.table_index;
    let table = graph.table(et);
    if table.row_count() == 0 {
        return Err(TaskgenError::EmptyEntityTable(table.name().to_string()));
    }
    if let Some(&bad) = entities.iter().find(|&&e| e as usize >= table.row_count()) {
        return Err(TaskgenError::EntityNotFound(bad));
    }
    let lags = if plan.temporal { config.lag_timesteps } else { 0 };
    let mut context = Vec::new();
    match &plan.label {
        LabelSpec::Provided => return Err(TaskgenError::NoLabelRule),
        LabelSpec::Static { .. } => {
            let exclude: HashSet<u32> = entities.iter().copied().collect();
            let mut pool: Vec<u32> = (0..table.row_count() as u32)
                .filter(|e| !exclude.contains(e) && table.times()[*e as usize] <= anchor_t)
                .collect();
            pool.sort_by_cached_key(|&e| draw_key(config.seed, table.key_of_row(e as usize), anchor_t, e));
            for e in pool {
                if context.len() >= config.budget {
                    break;
                }
                if let Some(y) = compute_label(access, plan, e, anchor_t)? {
                    context.push(TaskRow::new(e, anchor_t, Some(y)));
                }
            }
        }
        LabelSpec::Aggregate { link, table_index, .. } => {
            let agg_first = graph
                .table(*table_index)
                .times()
                .iter()
                .copied()
                .filter(|&t| t != NEG_INF && t != UNKNOWN_TIME)
                .min()
                .unwrap_or(UNKNOWN_TIME);
            let a1 = context_anchors(plan, anchor_t, 1)[0];
            if a1 < agg_first {
                return Err(TaskgenError::InsufficientHistory {
                    anchor: a1,
                    first_event: agg_first,
                });
            }
            let w = plan.window_len_ms();
            let n_anchors = (((a1 - agg_first) / w) as usize + 1).min(MAX_SNAPSHOTS);
            let anchors = context_anchors(plan, anchor_t, n_anchors);
            let firsts: Vec<Option<i64>> = (0..table.row_count() as u32)
                .map(|e| first_event(access, *link, e))
                .collect();
            let eligible =
                |e: u32, a: i64| firsts[e as usize].is_some_and(|f| f <= a) && table.times()[e as usize] <= a;

            let local_budget = ((config.budget as f64) * config.local_fraction).round() as usize;
            let mut used: HashSet<(u32, i64)> = HashSet::new();
            let mut next_anchor = vec![0usize; entities.len()];
            let mut active: Vec<usize> = (0..entities.len()).collect();
            let mut seen_entities = HashSet::new();
            active.retain(|&i| seen_entities.insert(entities[i]));
            while context.len() < local_budget && !active.is_empty() {
                let mut still = Vec::with_capacity(active.len());
                for &i in &active {
                    if context.len() >= local_budget {
                        break;
                    }
                    let e = entities[i];
                    while next_anchor[i] < anchors.len() {
                        let a = anchors[next_anchor[i]];
                        next_anchor[i] += 1;
                        if !eligible(e, a) {
                            continue;
                        }
                        if let Some(y) = compute_label(access, plan, e, a)? {
                            used.insert((e, a));
                            context.push(TaskRow::new(e, a, Some(y)));
                            break;
                        }
                    }
                    if next_anchor[i] < anchors.len() {
                        still.push(i);
                    }
                }
                active = still;
            }

            let global_budget = config.budget.saturating_sub(context.len());
            let mut k = config.snapshots.max(1).min(anchors.len());
            let pool = loop {
                let pool: Vec<(u32, i64)> = anchors[..k]
                    .iter()
                    .flat_map(|&a| (0..table.row_count() as u32).map(move |e| (e, a)))
                    .filter(|&(e, a)| eligible(e, a) && !used.contains(&(e, a)))
                    .collect();
                if pool.len() >= global_budget || k == anchors.len() {
                    break pool;
                }
                k = (k * 2).min(anchors.len());
            };
            let mut pool = pool;
            pool.sort_by_cached_key(|&(e, a)| draw_key(config.seed, table.key_of_row(e as usize), a, e));
            let mut taken = 0;
            for (e, a) in pool {
                if taken >= global_budget {
                    break;
                }
                if let Some(y) = compute_label(access, plan, e, a)? {
                    context.push(TaskRow::new(e, a, Some(y)));
                    taken += 1;
                }
            }
        }
    }
    context.sort_by_key(|r| (r.entity, r.anchor));
    let mut predict: Vec<TaskRow> = entities.iter().map(|&e| TaskRow::new(e, anchor_t, None)).collect();
    if lags > 0 {
        for r in context.iter_mut().chain(predict.iter_mut()) {
            r.lags = lag_values(access, plan, r.entity, r.anchor, lags)?;
        }
    }
    Ok(TaskTable {
        task_type: plan.task_type,
        entity_table: et,
        classes: plan.classes.clone(),
        lag_timesteps: lags,
        context,
        predict,
    })
}

/// Attaches ground-truth labels to rows (for evaluation; reads the future of each
/// anchor by design).
pub fn label_rows<A: NeighborAccess + ?Sized>(
    access: &A,
    plan: &TaskPlan,
    rows: &mut [TaskRow],
) -> Result<(), TaskgenError> {
    for r in rows {
        r.target = compute_label(access, plan, r.entity, r.anchor)?;
    }
    Ok(())
}

/// Context and evaluation parts of a labeled row set.
#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutSplit {
    pub context: Vec<TaskRow>,
    pub eval: Vec<TaskRow>,
}

/// Splits labeled rows into context and evaluation parts. With `temporal`, rows are
/// ordered by anchor and every row at or after the boundary anchor goes to evaluation,
/// so all context anchors precede all evaluation anchors; otherwise a seeded shuffle
/// takes `round(fraction * n)` rows for evaluation.
pub fn holdout_split(rows: &[TaskRow], fraction: f64, temporal: bool, seed: u64) -> Result<HoldoutSplit, TaskgenError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(TaskgenError::Config(format!("fraction {fraction} outside (0, 1)")));
    }
    let n = rows.len();
    let n_eval = ((n as f64) * fraction).round() as usize;
    if n_eval == 0 || n_eval >= n {
        return Err(TaskgenError::Degenerate(format!(
            "{n} rows with fraction {fraction} leave an empty side"
        )));
    }
    let (mut context, mut eval) = if temporal {
        let mut sorted = rows.to_vec();
        sorted.sort_by_key(|r| (r.anchor, r.entity));
        let boundary = sorted[n - n_eval].anchor;
        let (c, e): (Vec<_>, Vec<_>) = sorted.into_iter().partition(|r| r.anchor < boundary);
        if c.is_empty() {
            return Err(TaskgenError::Degenerate(
                "all rows share the earliest anchor; no temporal split exists".into(),
            ));
        }
        (c, e)
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng_for(&[seed, 0x4F1D]));
        let eval = idx[..n_eval].iter().map(|&i| rows[i].clone()).collect();
        let context = idx[n_eval..].iter().map(|&i| rows[i].clone()).collect();
        (context, eval)
    };
    context.sort_by_key(|r| (r.entity, r.anchor));
    eval.sort_by_key(|r| (r.entity, r.anchor));
    Ok(HoldoutSplit { context, eval })
}
