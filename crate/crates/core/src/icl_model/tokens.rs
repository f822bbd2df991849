//! Episode assembly: subgraph sampling, cell tokenization and the index layouts the
//! network consumes. Everything here is plain data; no parameters are involved.

use std::collections::HashMap;

use rand::seq::SliceRandom;

use super::ModelError;
use crate::colstore::{ColumnData, NeighborAccess};
use crate::pql::{LabelSpec, TaskPlan, TaskType};
use crate::relgraph::{NodeId, SemanticType};
use crate::sampler::{sample_subgraph, SampleOptions, DELTA_INF};
use crate::taskgen::TaskRow;
use crate::time::{calendar_phase, MS_PER_DAY};
use crate::util::{hash_str, hash_words, mix64, rng_for, unit_f64};

pub(crate) const HASH_DIM: usize = 16;
pub(crate) const NUM_FEATS: usize = 3;
pub(crate) const TIME_FEATS: usize = 5;
pub(crate) const NODE_TIME_FEATS: usize = 2;

/// Token kinds in the order their embeddings are concatenated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Kind {
    Num = 0,
    Cat = 1,
    Text = 2,
    Time = 3,
    Null = 4,
    TargetNum = 5,
    TargetLabeled = 6,
    TargetMask = 7,
}

pub(crate) const N_KINDS: usize = 8;

impl Kind {
    pub(crate) fn width(self) -> usize {
        match self {
            Kind::Num | Kind::TargetNum => NUM_FEATS,
            Kind::Cat | Kind::Text => HASH_DIM,
            Kind::Time => TIME_FEATS,
            Kind::Null | Kind::TargetLabeled | Kind::TargetMask => 0,
        }
    }
}

/// Type embedding rows: numerical, categorical, text, timestamp, target.
pub(crate) const N_TYPES: usize = 5;
const TYPE_TARGET: usize = 4;

fn type_of(stype: SemanticType) -> usize {
    match stype {
        SemanticType::Numerical | SemanticType::Identifier => 0,
        SemanticType::Categorical => 1,
        SemanticType::Text => 2,
        SemanticType::Timestamp => 3,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Slot {
    Column(u32, u32),
    Lag(u32),
    Target,
}

/// Options controlling episode construction.
#[derive(Debug, Clone)]
pub(crate) struct EpisodeOptions {
    pub sample: SampleOptions,
    /// Probability of hiding each feature cell of context rows.
    pub feature_drop: f64,
    pub seed: u64,
    /// Seed of a column-order shuffle applied during tokenization.
    pub column_shuffle: Option<u64>,
}

/// Tokens in embedding order (grouped by [`Kind`]).
#[derive(Debug, Clone, Default)]
pub(crate) struct Tokens {
    pub counts: [usize; N_KINDS],
    pub feats: [Vec<f64>; N_KINDS],
    pub type_id: Vec<usize>,
    pub instance: Vec<usize>,
    pub group: Vec<usize>,
}

impl Tokens {
    pub(crate) fn len(&self) -> usize {
        self.instance.len()
    }
}

/// A batch of context and prediction examples, tokenized.
#[derive(Debug, Clone)]
pub(crate) struct Episode {
    pub task_type: TaskType,
    pub n_ctx: usize,
    pub n_pred: usize,
    /// Dictionary indices of classes present in the context, ascending.
    pub present: Vec<usize>,
    /// Per context row, the position of its class in `present`.
    pub ctx_class: Vec<usize>,
    /// Regression: robust-normalized context targets.
    pub ctx_z: Vec<f64>,
    pub center: f64,
    pub scale: f64,
    pub inst_example: Vec<usize>,
    pub inst_hop: Vec<usize>,
    pub inst_time: Vec<f64>,
    pub inst_static: Vec<f64>,
    pub inst_degree: Vec<f64>,
    /// Neighbor instances with direction 0 (towards the primary-key side) or 1.
    pub inst_nbrs: Vec<Vec<(usize, usize)>>,
    pub roots: Vec<usize>,
    pub tokens: Tokens,
    pub n_groups: usize,
    /// False for zero-hop sampling, where the graph encoder is bypassed.
    pub graph_stage: bool,
}

impl Episode {
    pub(crate) fn n_examples(&self) -> usize {
        self.n_ctx + self.n_pred
    }

    pub(crate) fn n_instances(&self) -> usize {
        self.inst_example.len()
    }

    pub(crate) fn is_classification(&self) -> bool {
        self.task_type != TaskType::Regression
    }

    /// Whether regression targets are constant, in which case predictions are the
    /// context center exactly.
    pub(crate) fn is_degenerate(&self) -> bool {
        !self.is_classification() && self.scale == 0.0
    }
}

/// Pseudo-random ±1/4 code of a string: a fixed embedding of dictionary values that
/// needs no vocabulary.
pub(crate) fn hashed_code(s: &str, out: &mut [f64]) {
    let h = hash_str(s);
    for (k, o) in out.iter_mut().enumerate() {
        *o += if mix64(h ^ (k as u64).wrapping_mul(0x9E37)) & 1 == 1 {
            0.25
        } else {
            -0.25
        };
    }
}

pub(crate) fn number_feats(z: f64) -> [f64; NUM_FEATS] {
    [
        z.signum() * f64::from(u8::from(z != 0.0)),
        z.abs().ln_1p(),
        z.clamp(-5.0, 5.0),
    ]
}

fn time_feats(anchor: i64, t: i64) -> [f64; TIME_FEATS] {
    let days = (anchor - t) as f64 / MS_PER_DAY as f64;
    let (dow, doy) = calendar_phase(t).unwrap_or((0.0, 0.0));
    let tau = std::f64::consts::TAU;
    [
        days.signum() * days.abs().ln_1p() / 4.0,
        (tau * dow / 7.0).sin(),
        (tau * dow / 7.0).cos(),
        (tau * doy / 365.25).sin(),
        (tau * doy / 365.25).cos(),
    ]
}

/// Inverse-CDF quantile: smallest value whose empirical CDF reaches `p`; with `upper`,
/// the smallest whose CDF exceeds `p`. Depends only on the empirical distribution, so
/// duplicating every value leaves it unchanged.
fn quantile(sorted: &[f64], p: f64, upper: bool) -> f64 {
    let n = sorted.len() as f64;
    let k = if upper {
        (p * n).floor() as usize
    } else {
        ((p * n).ceil() as usize).max(1) - 1
    };
    sorted[k.min(sorted.len() - 1)]
}

/// Robust center and scale of regression targets: median and IQR / 1.349, falling
/// back to the standard deviation when the IQR vanishes.
pub(crate) fn robust_scale(values: &[f64]) -> (f64, f64) {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let med = 0.5 * (quantile(&s, 0.5, false) + quantile(&s, 0.5, true));
    let q1 = 0.5 * (quantile(&s, 0.25, false) + quantile(&s, 0.25, true));
    let q3 = 0.5 * (quantile(&s, 0.75, false) + quantile(&s, 0.75, true));
    let iqr = (q3 - q1) / 1.349;
    if iqr > 0.0 {
        return (med, iqr);
    }
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    let var = s.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / s.len() as f64;
    (med, var.sqrt())
}

struct Instance {
    example: usize,
    node: NodeId,
    hop: usize,
    anchor: i64,
    is_root: bool,
}

struct RawToken {
    kind: Kind,
    feats: Vec<f64>,
    type_id: usize,
    instance: usize,
    slot: Slot,
}

#[derive(Default, Clone, Copy)]
struct Moments {
    n: f64,
    sum: f64,
    sumsq: f64,
}

impl Moments {
    fn add(&mut self, x: f64) {
        self.n += 1.0;
        self.sum += x;
        self.sumsq += x * x;
    }

    fn mean_std(&self) -> (f64, f64) {
        if self.n == 0.0 {
            return (0.0, 1.0);
        }
        let mean = self.sum / self.n;
        let var = (self.sumsq / self.n - mean * mean).max(0.0);
        let std = var.sqrt();
        if std > 1e-12 * mean.abs().max(1.0) {
            (mean, std)
        } else {
            (mean, 1.0)
        }
    }
}

/// Columns tokenized for a table: everything except identifiers and a static target.
fn feature_columns<A: NeighborAccess + ?Sized>(access: &A, plan: &TaskPlan, table: usize) -> Vec<usize> {
    let excluded = match &plan.label {
        LabelSpec::Static { column_index, .. } if table == plan.entity.table_index => Some(*column_index),
        _ => None,
    };
    access
        .graph()
        .table(table)
        .columns()
        .iter()
        .enumerate()
        .filter(|(c, col)| col.stype != SemanticType::Identifier && Some(*c) != excluded)
        .map(|(c, _)| c)
        .collect()
}

/// Samples subgraphs for every example and tokenizes them.
pub(crate) fn build_episode<A: NeighborAccess + ?Sized>(
    access: &A,
    plan: &TaskPlan,
    context: &[TaskRow],
    predict: &[TaskRow],
    opts: &EpisodeOptions,
) -> Result<Episode, ModelError> {
    if context.is_empty() {
        return Err(ModelError::EmptyContext);
    }
    let graph = access.graph();
    let et = plan.entity.table_index;
    let classification = plan.task_type != TaskType::Regression;

    let mut present: Vec<usize> = Vec::new();
    let mut ctx_class = Vec::new();
    let mut ctx_z = Vec::new();
    let (mut center, mut scale) = (0.0, 1.0);
    let targets: Vec<f64> = context
        .iter()
        .map(|r| r.target.ok_or(ModelError::UnlabeledContext))
        .collect::<Result<_, _>>()?;
    if classification {
        for &y in &targets {
            let k = y as usize;
            if y < 0.0 || y.fract() != 0.0 || k >= plan.n_classes() {
                return Err(ModelError::ClassMismatch(format!(
                    "context label {y} outside the {} classes of the plan",
                    plan.n_classes()
                )));
            }
        }
        present = targets.iter().map(|&y| y as usize).collect();
        present.sort_unstable();
        present.dedup();
        ctx_class = targets
            .iter()
            .map(|&y| present.binary_search(&(y as usize)).expect("present"))
            .collect();
    } else {
        (center, scale) = robust_scale(&targets);
        ctx_z = targets
            .iter()
            .map(|&y| if scale > 0.0 { (y - center) / scale } else { 0.0 })
            .collect();
    }

    // Sample every example and lay out its nodes as instances.
    let mut instances: Vec<Instance> = Vec::new();
    let mut inst_nbrs: Vec<Vec<(usize, usize)>> = Vec::new();
    let mut inst_time = Vec::new();
    let mut inst_static = Vec::new();
    let mut roots = Vec::new();
    let rows: Vec<&TaskRow> = context.iter().chain(predict).collect();
    for (ex, row) in rows.iter().enumerate() {
        let root = NodeId::new(et, row.entity as usize);
        let sg = sample_subgraph(access, root, row.anchor, &opts.sample)?;
        let base = instances.len();
        roots.push(base);
        for (i, &node) in sg.nodes.iter().enumerate() {
            instances.push(Instance {
                example: ex,
                node,
                hop: sg.hops[i] as usize,
                anchor: row.anchor,
                is_root: i == 0,
            });
            inst_nbrs.push(Vec::new());
            if sg.delta[i] == DELTA_INF {
                inst_time.push(0.0);
                inst_static.push(1.0);
            } else {
                inst_time.push((sg.delta[i] as f64 / MS_PER_DAY as f64).max(0.0).ln_1p() / 4.0);
                inst_static.push(0.0);
            }
        }
        for e in &sg.edges {
            let (s, d) = (base + e.src as usize, base + e.dst as usize);
            inst_nbrs[s].push((d, 0));
            inst_nbrs[d].push((s, 1));
        }
    }
    let inst_degree = inst_nbrs.iter().map(|n| (n.len() as f64).ln_1p()).collect();

    let mut columns: HashMap<usize, Vec<usize>> = HashMap::new();
    for t in 0..graph.tables().len() {
        let mut cols = feature_columns(access, plan, t);
        if let Some(seed) = opts.column_shuffle {
            cols.shuffle(&mut rng_for(&[seed, 0xC01, t as u64]));
        }
        columns.insert(t, cols);
    }
    let dropped = |ex: usize, node: NodeId, c: usize| {
        opts.feature_drop > 0.0
            && ex < context.len()
            && unit_f64(hash_words(&[
                opts.seed,
                0xD409,
                ex as u64,
                node.table as u64,
                node.row as u64,
                c as u64,
            ])) < opts.feature_drop
    };

    // Context statistics of numerical columns and lags.
    let mut moments: HashMap<Slot, Moments> = HashMap::new();
    for inst in instances.iter().filter(|i| i.example < context.len()) {
        let table = graph.table(inst.node.table as usize);
        for &c in &columns[&(inst.node.table as usize)] {
            let col = &table.columns()[c];
            if col.stype == SemanticType::Numerical && !dropped(inst.example, inst.node, c) {
                if let Some(x) = col.f64_at(inst.node.row as usize).filter(|x| x.is_finite()) {
                    moments
                        .entry(Slot::Column(inst.node.table, c as u32))
                        .or_default()
                        .add(x);
                }
            }
        }
        if inst.is_root {
            for (j, lag) in rows[inst.example].lags.iter().enumerate() {
                if let Some(x) = lag.filter(|x| x.is_finite()) {
                    moments.entry(Slot::Lag(j as u32)).or_default().add(x);
                }
            }
        }
    }
    let stats: HashMap<Slot, (f64, f64)> = moments.iter().map(|(k, m)| (*k, m.mean_std())).collect();
    let z_of = |slot: Slot, x: f64| {
        let (m, s) = stats.get(&slot).copied().unwrap_or((0.0, 1.0));
        (x - m) / s
    };

    let mut raw: Vec<RawToken> = Vec::new();
    for (ii, inst) in instances.iter().enumerate() {
        let t = inst.node.table as usize;
        let r = inst.node.row as usize;
        let table = graph.table(t);
        for &c in &columns[&t] {
            let col = &table.columns()[c];
            let slot = Slot::Column(t as u32, c as u32);
            let type_id = type_of(col.stype);
            let mut push = |kind: Kind, feats: Vec<f64>| {
                raw.push(RawToken {
                    kind,
                    feats,
                    type_id,
                    instance: ii,
                    slot,
                })
            };
            if dropped(inst.example, inst.node, c) || !col.is_valid(r) {
                push(Kind::Null, Vec::new());
                continue;
            }
            match (&col.data, col.stype) {
                (ColumnData::Float(v), _) => {
                    let x = v[r];
                    if x.is_finite() {
                        push(Kind::Num, number_feats(z_of(slot, x)).to_vec());
                    } else {
                        push(Kind::Null, Vec::new());
                    }
                }
                (ColumnData::Time(v), _) => push(Kind::Time, time_feats(inst.anchor, v[r]).to_vec()),
                (ColumnData::Codes { .. }, SemanticType::Text) => {
                    let text = col.str_at(r).unwrap_or("");
                    let mut f = vec![0.0; HASH_DIM];
                    let words: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
                    for w in &words {
                        hashed_code(w, &mut f);
                    }
                    let norm = (words.len().max(1) as f64).sqrt();
                    f.iter_mut().for_each(|x| *x /= norm);
                    push(Kind::Text, f);
                }
                (ColumnData::Codes { .. }, _) => {
                    let mut f = vec![0.0; HASH_DIM];
                    hashed_code(col.str_at(r).unwrap_or(""), &mut f);
                    push(Kind::Cat, f);
                }
            }
        }
        if inst.is_root {
            let row = rows[inst.example];
            for (j, lag) in row.lags.iter().enumerate() {
                let slot = Slot::Lag(j as u32);
                let (kind, feats) = match lag.filter(|x| x.is_finite()) {
                    Some(x) => (Kind::Num, number_feats(z_of(slot, x)).to_vec()),
                    None => (Kind::Null, Vec::new()),
                };
                raw.push(RawToken {
                    kind,
                    feats,
                    type_id: 0,
                    instance: ii,
                    slot,
                });
            }
            let (kind, feats) = if inst.example >= context.len() {
                (Kind::TargetMask, Vec::new())
            } else if classification {
                (Kind::TargetLabeled, Vec::new())
            } else {
                (Kind::TargetNum, number_feats(ctx_z[inst.example]).to_vec())
            };
            raw.push(RawToken {
                kind,
                feats,
                type_id: TYPE_TARGET,
                instance: ii,
                slot: Slot::Target,
            });
        }
    }

    let mut group_ids: HashMap<Slot, usize> = HashMap::new();
    let mut tokens = Tokens::default();
    for kind in 0..N_KINDS {
        for tok in raw.iter().filter(|t| t.kind as usize == kind) {
            let next = group_ids.len();
            let g = *group_ids.entry(tok.slot).or_insert(next);
            tokens.counts[kind] += 1;
            tokens.feats[kind].extend_from_slice(&tok.feats);
            tokens.type_id.push(tok.type_id);
            tokens.instance.push(tok.instance);
            tokens.group.push(g);
        }
    }

    Ok(Episode {
        task_type: plan.task_type,
        n_ctx: context.len(),
        n_pred: predict.len(),
        present,
        ctx_class,
        ctx_z,
        center,
        scale,
        inst_example: instances.iter().map(|i| i.example).collect(),
        inst_hop: instances.iter().map(|i| i.hop).collect(),
        inst_time,
        inst_static,
        inst_degree,
        inst_nbrs,
        roots,
        tokens,
        n_groups: group_ids.len(),
        graph_stage: !opts.sample.fanouts.is_empty(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn robust_scale_is_duplication_invariant() {
        let v = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0];
        let mut d = v.to_vec();
        d.extend_from_slice(&v);
        assert_eq!(robust_scale(&v), robust_scale(&d));
        let even = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(robust_scale(&even).0, 2.5);
    }

    #[test]
    fn constant_targets_have_zero_scale() {
        assert_eq!(robust_scale(&[7.0, 7.0, 7.0]), (7.0, 0.0));
    }

    #[test]
    fn number_features_are_odd() {
        let a = number_feats(2.5);
        let b = number_feats(-2.5);
        assert_eq!(a[0], -b[0]);
        assert_eq!(a[1], b[1]);
        assert_eq!(number_feats(0.0), [0.0, 0.0, 0.0]);
    }
}
