use rand::seq::SliceRandom;
use rand::Rng;

use super::{compile_query, meta, ScmError, EPOCH_MS};
use crate::colstore::Column;
use crate::pql::TaskPlan;
use crate::relgraph::{LinkMeta, Schema, SemanticType, TableMeta, TemporalGraph};
use crate::taskgen::TaskRow;
use crate::time::MS_PER_DAY;
use crate::util::rng_for;

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionConfig {
    pub n_entities: usize,
    /// Inclusive range of child rows per entity; both members of a pair share a count.
    pub rows_per_entity: (usize, usize),
    /// Extra binary child columns whose per-pair multisets are identical.
    pub distractors: usize,
    pub horizon_days: i64,
}

/// A two-table benchmark: `t1(id, label)` with child rows `t2(id, t1_id, a, b, ...)`.
/// Entities `2p` and `2p + 1` form a matched pair with opposite labels.
#[derive(Debug, Clone)]
pub struct InteractionTask {
    pub graph: TemporalGraph,
    pub plan: TaskPlan,
    pub rows: Vec<TaskRow>,
}

/// The conjunction benchmark: `y = 1` iff some child row has `a = 1` and `b = 1`.
/// Each negative has the same number of rows, of `a = 1` and of `b = 1` as its paired
/// positive, so every column-wise aggregate agrees within a pair.
pub fn make_conjunction(n_entities: usize, rows_per_entity: usize, seed: u64) -> Result<InteractionTask, ScmError> {
    make_interaction(
        &InteractionConfig {
            n_entities,
            rows_per_entity: (rows_per_entity, rows_per_entity),
            distractors: 0,
            horizon_days: 360,
        },
        seed,
    )
}

/// Child row: entity, a, b, distractor bits, time.
type ChildRow = (u32, u8, u8, Vec<u8>, i64);

/// `(a, b)` cells, one pair per child row.
type Cells = Vec<(u8, u8)>;

/// Child rows `(a, b)` of a matched pair with `n_a` ones in `a`, `n_b` in `b`.
fn pair_rows(r: usize, n_a: usize, n_b: usize) -> (Cells, Cells) {
    let mut pos = vec![(1, 1)];
    pos.extend(std::iter::repeat_n((1, 0), n_a - 1));
    pos.extend(std::iter::repeat_n((0, 1), n_b - 1));
    pos.extend(std::iter::repeat_n((0, 0), r + 1 - n_a - n_b));
    let mut neg = vec![(1, 0); n_a];
    neg.extend(std::iter::repeat_n((0, 1), n_b));
    neg.extend(std::iter::repeat_n((0, 0), r - n_a - n_b));
    (pos, neg)
}

pub fn make_interaction(cfg: &InteractionConfig, seed: u64) -> Result<InteractionTask, ScmError> {
    let (lo, hi) = cfg.rows_per_entity;
    if lo < 2 || hi < lo {
        return Err(ScmError::Infeasible(format!(
            "rows per entity must be at least 2 (got {lo}..={hi})"
        )));
    }
    if cfg.n_entities < 2 {
        return Err(ScmError::Config("need at least one matched pair".into()));
    }
    let mut rng = rng_for(&[seed, 0xC0_4A]);
    let horizon = cfg.horizon_days * MS_PER_DAY;
    let n = cfg.n_entities;
    let mut labels = vec![false; n];
    let mut child: Vec<ChildRow> = Vec::new();
    for p in 0..n.div_ceil(2) {
        let r = rng.gen_range(lo..=hi);
        let n_a = rng.gen_range(1..r);
        let n_b = rng.gen_range(1..=r - n_a);
        let (mut pos, mut neg) = pair_rows(r, n_a, n_b);
        let extras: Vec<(Vec<u8>, i64)> = (0..r)
            .map(|_| {
                let d = (0..cfg.distractors).map(|_| rng.gen_range(0..2u8)).collect();
                (d, rng.gen_range(0..horizon))
            })
            .collect();
        let positive_first = rng.gen_bool(0.5);
        for (k, rows) in [&mut pos, &mut neg].into_iter().enumerate() {
            let e = 2 * p + usize::from((k == 0) != positive_first);
            if e >= n {
                continue;
            }
            labels[e] = k == 0;
            rows.shuffle(&mut rng);
            let mut ex = extras.clone();
            ex.shuffle(&mut rng);
            for (&(a, b), (d, t)) in rows.iter().zip(ex) {
                child.push((e as u32, a, b, d, t));
            }
        }
    }
    child.sort_by_key(|c| (c.0, c.4));

    let keys: Vec<Option<String>> = (0..n).map(|e| Some(format!("e{e}"))).collect();
    let label_col: Vec<Option<&str>> = labels.iter().map(|&y| Some(if y { "true" } else { "false" })).collect();
    let ids: Vec<Option<String>> = (0..child.len()).map(|i| Some(format!("r{i}"))).collect();
    let fks: Vec<Option<String>> = child.iter().map(|c| Some(format!("e{}", c.0))).collect();
    let bin = |f: &dyn Fn(&ChildRow) -> u8| -> Vec<Option<f64>> { child.iter().map(|c| Some(f(c) as f64)).collect() };
    let mut t2_meta = vec![
        meta("id", SemanticType::Identifier),
        meta("t1_id", SemanticType::Identifier),
        meta("a", SemanticType::Numerical),
        meta("b", SemanticType::Numerical),
    ];
    let mut t2_cols = vec![
        Column::from_strings("id", SemanticType::Identifier, &ids),
        Column::from_strings("t1_id", SemanticType::Identifier, &fks),
        Column::from_f64("a", &bin(&|c| c.1)),
        Column::from_f64("b", &bin(&|c| c.2)),
    ];
    for k in 0..cfg.distractors {
        let name = format!("d{k}");
        t2_meta.push(meta(&name, SemanticType::Numerical));
        t2_cols.push(Column::from_f64(&name, &bin(&|c| c.3[k])));
    }
    let times: Vec<Option<i64>> = child.iter().map(|c| Some(EPOCH_MS + c.4)).collect();
    t2_meta.push(meta("time", SemanticType::Timestamp));
    t2_cols.push(Column::from_times("time", &times));
    let schema = Schema {
        tables: vec![
            TableMeta {
                name: "t1".into(),
                columns: vec![
                    meta("id", SemanticType::Identifier),
                    meta("label", SemanticType::Categorical),
                ],
                primary_key: Some("id".into()),
                time_column: None,
                derived_columns: Vec::new(),
            },
            TableMeta {
                name: "t2".into(),
                columns: t2_meta,
                primary_key: Some("id".into()),
                time_column: Some("time".into()),
                derived_columns: Vec::new(),
            },
        ],
        links: vec![LinkMeta {
            src_table: "t2".into(),
            fkey_column: "t1_id".into(),
            dst_table: "t1".into(),
        }],
    };
    let graph = TemporalGraph::from_columns(
        schema,
        vec![
            vec![
                Column::from_strings("id", SemanticType::Identifier, &keys),
                Column::from_strings("label", SemanticType::Categorical, &label_col),
            ],
            t2_cols,
        ],
    )
    .map_err(|e| ScmError::Config(e.to_string()))?;
    let plan = compile_query("PREDICT t1.label FOR EACH t1.id", &graph)?;
    let anchor = EPOCH_MS + horizon;
    let rows = labels
        .iter()
        .enumerate()
        .map(|(e, &y)| TaskRow::new(e as u32, anchor, Some(if y { 1.0 } else { 0.0 })))
        .collect();
    Ok(InteractionTask { graph, plan, rows })
}
