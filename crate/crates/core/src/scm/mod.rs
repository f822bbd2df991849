//! Seeded synthetic relational databases and tasks drawn from structural causal
//! models, plus the marginal-matched conjunction benchmark.
//!
//! Every variable is a column-level node with a [`Mechanism`]: an affine map of its
//! parents (same row, or the parent row reached through the foreign key), a
//! nonlinearity and additive noise. All noise draws are kept in the [`LatentRecord`],
//! so the forward pass can be replayed exactly.

mod conjunction;
mod fenwick;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colstore::{Column, Store};
use crate::pql::{compile, parse, TaskPlan, TaskType};
use crate::relgraph::{ColumnMeta, LinkMeta, Schema, SemanticType, TableMeta, TemporalGraph};
use crate::taskgen::{compute_label, TaskRow};
use crate::time::MS_PER_DAY;
use crate::util::rng_for;

pub use conjunction::{make_conjunction, make_interaction, InteractionConfig, InteractionTask};
use fenwick::Fenwick;

/// Start of synthetic time: 2020-01-01T00:00:00Z.
pub const EPOCH_MS: i64 = 1_577_836_800_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScmError {
    #[error("invalid SCM configuration: {0}")]
    Config(String),
    #[error("infeasible marginal matching: {0}")]
    Infeasible(String),
    #[error("task construction failed: {0}")]
    Task(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Identity,
    Tanh,
    Step,
}

impl Nonlinearity {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Identity => x,
            Nonlinearity::Tanh => (1.5 * x).tanh(),
            Nonlinearity::Step => {
                if x > 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }
}

/// Parent of a variable: another variable of the same row, or a variable of the row
/// the foreign key points to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarRef {
    Own(usize),
    Parent(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mechanism {
    pub parents: Vec<VarRef>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub nonlinearity: Nonlinearity,
    pub noise_scale: f64,
}

impl Mechanism {
    fn root() -> Mechanism {
        Mechanism {
            parents: Vec::new(),
            weights: Vec::new(),
            bias: 0.0,
            nonlinearity: Nonlinearity::Identity,
            noise_scale: 1.0,
        }
    }

    /// Value given parent values (in `parents` order) and the row's noise draw.
    pub fn eval(&self, parent_values: &[f64], noise: f64) -> f64 {
        let lin: f64 = self.bias + self.weights.iter().zip(parent_values).map(|(w, x)| w * x).sum::<f64>();
        self.nonlinearity.apply(lin) + self.noise_scale * noise
    }
}

/// How a variable surfaces in the generated table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Visibility {
    Hidden,
    Numerical(String),
    /// Bucketed at the given thresholds into categories `c0..cK`.
    Categorical(String, Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub mechanism: Mechanism,
    pub visibility: Visibility,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights {
    pub binary: f64,
    pub multiclass: f64,
    pub regression: f64,
    pub temporal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmConfig {
    pub n_entities: usize,
    /// Inclusive range of child fact tables; 0 yields a single-table database.
    pub child_tables: (usize, usize),
    /// Chance that a child table hangs off the previous child table (chain) rather
    /// than off the entity table (star).
    pub chain_prob: f64,
    /// Mean rows per parent row in every child table.
    pub rows_per_entity: f64,
    /// Inclusive range of visible feature columns per table.
    pub features: (usize, usize),
    /// Hidden root variables per table.
    pub hidden: usize,
    /// Hidden intermediate layers between roots and visible columns.
    pub mechanism_depth: usize,
    pub nonlinearities: Vec<Nonlinearity>,
    pub noise_scale: f64,
    pub categorical_prob: f64,
    /// Upper bound on pure-noise columns added per table.
    pub noise_columns: usize,
    /// Preferential attachment strength of foreign-key assignment.
    pub attachment: f64,
    /// How strongly the entity rate variable scales its child arrival intensity.
    pub rate_strength: f64,
    pub horizon_days: i64,
    pub task_weights: TaskWeights,
    pub max_classes: usize,
    /// Chance that a static task on a multi-table database targets the entity's
    /// hidden root (only visible through child rows) rather than a local column.
    pub relational_target_prob: f64,
}

impl Default for ScmConfig {
    fn default() -> Self {
        ScmConfig {
            n_entities: 200,
            child_tables: (1, 2),
            chain_prob: 0.3,
            rows_per_entity: 8.0,
            features: (1, 3),
            hidden: 2,
            mechanism_depth: 1,
            nonlinearities: vec![Nonlinearity::Identity, Nonlinearity::Tanh, Nonlinearity::Step],
            noise_scale: 0.3,
            categorical_prob: 0.2,
            noise_columns: 1,
            attachment: 0.1,
            rate_strength: 1.0,
            horizon_days: 360,
            task_weights: TaskWeights {
                binary: 1.0,
                multiclass: 0.5,
                regression: 0.7,
                temporal: 0.8,
            },
            max_classes: 4,
            relational_target_prob: 0.7,
        }
    }
}

impl ScmConfig {
    /// Single-table variant used by the first pre-training stage.
    pub fn single_table(&self) -> ScmConfig {
        ScmConfig {
            child_tables: (0, 0),
            task_weights: TaskWeights {
                temporal: 0.0,
                ..self.task_weights
            },
            ..self.clone()
        }
    }

    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), ScmError> {
        let bad = |m: &str| Err(ScmError::Config(m.to_string()));
        if self.n_entities < 1 {
            return bad("n_entities must be at least 1");
        }
        if self.child_tables.0 > self.child_tables.1 {
            return bad("child_tables range is empty");
        }
        if self.features.0 < 1 || self.features.0 > self.features.1 {
            return bad("features range must be non-empty and at least 1");
        }
        if self.hidden < 1 {
            return bad("hidden must be at least 1");
        }
        if self.nonlinearities.is_empty() {
            return bad("nonlinearity set is empty");
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return bad("noise_scale must be finite and non-negative");
        }
        if !(self.rows_per_entity > 0.0) || !(self.horizon_days >= 1) {
            return bad("rows_per_entity and horizon_days must be positive");
        }
        if !(0.0..=1.0).contains(&self.relational_target_prob) {
            return bad("relational_target_prob must lie in [0, 1]");
        }
        if self.max_classes < 2 {
            return bad("max_classes must be at least 2");
        }
        let w = self.task_weights;
        if [w.binary, w.multiclass, w.regression, w.temporal]
            .iter()
            .any(|x| !(*x >= 0.0))
            || w.binary + w.multiclass + w.regression + w.temporal <= 0.0
        {
            return bad("task weights must be non-negative with a positive sum");
        }
        Ok(())
    }
}

/// Generative record of one table: its variables, the per-row noise and realized
/// values of every variable, foreign-key targets and event times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentTable {
    pub name: String,
    pub parent: Option<usize>,
    pub variables: Vec<Variable>,
    pub noise: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub parent_rows: Vec<u32>,
    /// Event times (ms); empty for the static entity table.
    pub times: Vec<i64>,
}

impl LatentTable {
    pub fn row_count(&self) -> usize {
        self.noise.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentRecord {
    pub tables: Vec<LatentTable>,
    /// Entity variable scaling child arrival intensity.
    pub rate_var: usize,
    /// Entity variables eligible as static targets: one only reachable through child
    /// tables (when any exist) and one built from the entity's own columns.
    pub target_vars: Vec<usize>,
    pub horizon_ms: i64,
}

#[derive(Debug, Clone)]
pub struct ScmDatabase {
    pub graph: TemporalGraph,
    pub latent: LatentRecord,
}

impl ScmDatabase {
    pub fn is_single_table(&self) -> bool {
        self.latent.tables.len() == 1
    }
}

/// Replays every mechanism in topological order from the stored noise.
pub fn forward_values(latent: &LatentRecord) -> Vec<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<Vec<f64>>> = Vec::with_capacity(latent.tables.len());
    for t in &latent.tables {
        let n = t.row_count();
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(t.variables.len());
        for (v, var) in t.variables.iter().enumerate() {
            let mut col = Vec::with_capacity(n);
            let mut pv = Vec::with_capacity(var.mechanism.parents.len());
            for r in 0..n {
                pv.clear();
                for p in &var.mechanism.parents {
                    pv.push(match *p {
                        VarRef::Own(j) => vals[j][r],
                        VarRef::Parent(j) => {
                            let pt = t.parent.expect("parent reference without parent table");
                            out[pt][j][t.parent_rows[r] as usize]
                        }
                    });
                }
                col.push(var.mechanism.eval(&pv, t.noise[v][r]));
            }
            debug_assert_eq!(vals.len(), v);
            vals.push(col);
        }
        out.push(vals);
    }
    out
}

/// Box-Muller draw.
pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn random_mechanism(rng: &mut ChaCha8Rng, cfg: &ScmConfig, candidates: &[VarRef], forced: Option<VarRef>) -> Mechanism {
    let mut parents: Vec<VarRef> = forced.into_iter().collect();
    let want = rng.gen_range(1..=3usize).min(candidates.len().max(parents.len()));
    let mut pool: Vec<VarRef> = candidates.iter().copied().filter(|c| Some(*c) != forced).collect();
    pool.shuffle(rng);
    while parents.len() < want {
        match pool.pop() {
            Some(p) => parents.push(p),
            None => break,
        }
    }
    let k = parents.len().max(1) as f64;
    let weights = parents
        .iter()
        .map(|_| {
            let w: f64 = rng.gen_range(0.5..1.5);
            if rng.gen_bool(0.5) {
                w / k.sqrt()
            } else {
                -w / k.sqrt()
            }
        })
        .collect();
    Mechanism {
        parents,
        weights,
        bias: rng.gen_range(-0.3..0.3),
        nonlinearity: *cfg.nonlinearities.choose(rng).expect("non-empty"),
        noise_scale: cfg.noise_scale,
    }
}

/// Declares the variables of one table. Visible variables never use the entity's
/// first root when `hide_first_root` is set, so that root is only observable through
/// child rows.
fn plan_variables(
    rng: &mut ChaCha8Rng,
    cfg: &ScmConfig,
    has_parent: bool,
    parent_vars: usize,
    hide_first_root: bool,
    force_parent_root: bool,
) -> Vec<Variable> {
    let mut vars: Vec<Variable> = (0..cfg.hidden)
        .map(|_| Variable {
            mechanism: Mechanism::root(),
            visibility: Visibility::Hidden,
        })
        .collect();
    let parent_refs: Vec<VarRef> = if has_parent {
        (0..parent_vars).map(VarRef::Parent).collect()
    } else {
        Vec::new()
    };
    let first_visible_root = usize::from(hide_first_root);
    for _ in 0..cfg.mechanism_depth {
        let mut cands: Vec<VarRef> = (first_visible_root..vars.len()).map(VarRef::Own).collect();
        cands.extend(parent_refs.iter().copied());
        let m = random_mechanism(rng, cfg, &cands, None);
        vars.push(Variable {
            mechanism: m,
            visibility: Visibility::Hidden,
        });
    }
    let n_features = rng.gen_range(cfg.features.0..=cfg.features.1);
    let mut col = 0;
    for f in 0..n_features {
        let mut cands: Vec<VarRef> = (first_visible_root..vars.len()).map(VarRef::Own).collect();
        cands.extend(parent_refs.iter().copied());
        let forced = (force_parent_root && f == 0).then_some(VarRef::Parent(0));
        let m = random_mechanism(rng, cfg, &cands, forced);
        let visibility = if rng.gen_bool(cfg.categorical_prob) {
            Visibility::Categorical(format!("f{col}"), vec![-0.5, 0.5])
        } else {
            Visibility::Numerical(format!("f{col}"))
        };
        col += 1;
        vars.push(Variable {
            mechanism: m,
            visibility,
        });
    }
    for _ in 0..rng.gen_range(0..=cfg.noise_columns) {
        vars.push(Variable {
            mechanism: Mechanism::root(),
            visibility: Visibility::Numerical(format!("f{col}")),
        });
        col += 1;
    }
    vars
}

fn fill_noise(rng: &mut ChaCha8Rng, vars: &[Variable], n: usize) -> Vec<Vec<f64>> {
    vars.iter()
        .map(|_| (0..n).map(|_| standard_normal(rng)).collect())
        .collect()
}

/// Draws `n` events for `parents` rows by preferential attachment weighted by
/// `exp(strength * rate)`; returns (parent row, time offset ms) sorted by time.
fn attach_events(
    rng: &mut ChaCha8Rng,
    n: usize,
    rates: &[f64],
    strength: f64,
    attachment: f64,
    horizon_ms: i64,
) -> Vec<(u32, i64)> {
    let mut times: Vec<i64> = (0..n).map(|_| rng.gen_range(0..horizon_ms)).collect();
    times.sort_unstable();
    let base: Vec<f64> = rates.iter().map(|r| (strength * r).exp()).collect();
    let mut counts = vec![0u32; rates.len()];
    let mut tree = Fenwick::new(&base);
    times
        .into_iter()
        .map(|t| {
            let u = rng.gen_range(0.0..tree.total());
            let p = tree.find(u);
            counts[p] += 1;
            tree.set(p, base[p] * (1.0 + attachment * counts[p] as f64));
            (p as u32, t)
        })
        .collect()
}

/// Samples a star- or chain-shaped database with one static entity table and child
/// fact tables. Deterministic per seed.
pub fn sample_database(cfg: &ScmConfig, seed: u64) -> Result<ScmDatabase, ScmError> {
    cfg.validate()?;
    let mut rng = rng_for(&[seed, 0x5C4D]);
    let horizon_ms = cfg.horizon_days * MS_PER_DAY;
    let n_children = rng.gen_range(cfg.child_tables.0..=cfg.child_tables.1);

    let mut entity_vars = plan_variables(&mut rng, cfg, false, 0, n_children > 0, false);
    // Static target candidates: one driven by the first root, one by visible columns.
    let own: Vec<VarRef> = entity_vars
        .iter()
        .enumerate()
        .filter(|(_, v)| v.visibility != Visibility::Hidden && !v.mechanism.parents.is_empty())
        .map(|(i, _)| VarRef::Own(i))
        .collect();
    let relational = Mechanism {
        parents: vec![VarRef::Own(0)],
        weights: vec![1.0],
        bias: 0.0,
        nonlinearity: Nonlinearity::Identity,
        noise_scale: cfg.noise_scale * 0.5,
    };
    let mut local = random_mechanism(&mut rng, cfg, &own, None);
    local.noise_scale = cfg.noise_scale * 0.5;
    local.nonlinearity = Nonlinearity::Identity;
    let target_vars = vec![entity_vars.len(), entity_vars.len() + 1];
    for m in [relational, local] {
        entity_vars.push(Variable {
            mechanism: m,
            visibility: Visibility::Hidden,
        });
    }
    let rate_var = 0;

    let n = cfg.n_entities;
    let noise = fill_noise(&mut rng, &entity_vars, n);
    let mut tables = vec![LatentTable {
        name: "entity".into(),
        parent: None,
        variables: entity_vars,
        noise,
        values: Vec::new(),
        parent_rows: Vec::new(),
        times: Vec::new(),
    }];
    tables[0].values = replay_table(&tables, 0);

    for c in 0..n_children {
        let parent = if c > 0 && rng.gen_bool(cfg.chain_prob) { c } else { 0 };
        let parent_n = tables[parent].row_count();
        let parent_vars = tables[parent].variables.len();
        let vars = plan_variables(&mut rng, cfg, true, parent_vars, false, parent == 0);
        let count = (parent_n as f64 * cfg.rows_per_entity).round() as usize;
        let (parent_rows, times): (Vec<u32>, Vec<i64>) = if parent == 0 {
            let rates = &tables[0].values[rate_var];
            attach_events(&mut rng, count, rates, cfg.rate_strength, cfg.attachment, horizon_ms)
                .into_iter()
                .unzip()
        } else {
            let flat = vec![0.0; parent_n];
            let mut ev: Vec<(u32, i64)> = attach_events(&mut rng, count, &flat, 0.0, cfg.attachment, horizon_ms)
                .into_iter()
                .map(|(p, _)| {
                    let delay = (rng.gen_range(f64::EPSILON..1.0f64).ln() * -(horizon_ms as f64) / 20.0) as i64;
                    (p, tables[parent].times[p as usize] + delay)
                })
                .collect();
            ev.sort_by_key(|&(p, t)| (t, p));
            ev.into_iter().unzip()
        };
        let noise = fill_noise(&mut rng, &vars, parent_rows.len());
        tables.push(LatentTable {
            name: format!("t{}", c + 1),
            parent: Some(parent),
            variables: vars,
            noise,
            values: Vec::new(),
            parent_rows,
            times,
        });
        let idx = tables.len() - 1;
        tables[idx].values = replay_table(&tables, idx);
    }
    let latent = LatentRecord {
        tables,
        rate_var,
        target_vars,
        horizon_ms,
    };
    let graph = build_scm_graph(&latent)?;
    Ok(ScmDatabase { graph, latent })
}

fn replay_table(tables: &[LatentTable], idx: usize) -> Vec<Vec<f64>> {
    let t = &tables[idx];
    let n = t.row_count();
    let mut vals: Vec<Vec<f64>> = Vec::with_capacity(t.variables.len());
    for (v, var) in t.variables.iter().enumerate() {
        let col = (0..n)
            .map(|r| {
                let pv: Vec<f64> = var
                    .mechanism
                    .parents
                    .iter()
                    .map(|p| match *p {
                        VarRef::Own(j) => vals[j][r],
                        VarRef::Parent(j) => tables[t.parent.expect("parent")].values[j][t.parent_rows[r] as usize],
                    })
                    .collect();
                var.mechanism.eval(&pv, t.noise[v][r])
            })
            .collect();
        vals.push(col);
    }
    vals
}

fn bucket(x: f64, thresholds: &[f64]) -> usize {
    thresholds.iter().filter(|&&t| x > t).count()
}

fn meta(name: &str, stype: SemanticType) -> ColumnMeta {
    ColumnMeta {
        name: name.into(),
        stype,
    }
}

fn build_scm_graph(latent: &LatentRecord) -> Result<TemporalGraph, ScmError> {
    let mut metas = Vec::new();
    let mut columns = Vec::new();
    let mut links = Vec::new();
    for (ti, t) in latent.tables.iter().enumerate() {
        let n = t.row_count();
        let mut cm = vec![meta("id", SemanticType::Identifier)];
        let keys: Vec<Option<String>> = (0..n).map(|r| Some(row_key(&t.name, r))).collect();
        let mut cols = vec![Column::from_strings("id", SemanticType::Identifier, &keys)];
        if let Some(p) = t.parent {
            let pname = &latent.tables[p].name;
            let fk = format!("{pname}_id");
            let vals: Vec<Option<String>> = t
                .parent_rows
                .iter()
                .map(|&r| Some(row_key(pname, r as usize)))
                .collect();
            cm.push(meta(&fk, SemanticType::Identifier));
            cols.push(Column::from_strings(&fk, SemanticType::Identifier, &vals));
            links.push(LinkMeta {
                src_table: t.name.clone(),
                fkey_column: fk,
                dst_table: pname.clone(),
            });
        }
        for (v, var) in t.variables.iter().enumerate() {
            match &var.visibility {
                Visibility::Hidden => {}
                Visibility::Numerical(name) => {
                    let vals: Vec<Option<f64>> = t.values[v].iter().map(|&x| Some(x)).collect();
                    cm.push(meta(name, SemanticType::Numerical));
                    cols.push(Column::from_f64(name, &vals));
                }
                Visibility::Categorical(name, th) => {
                    let vals: Vec<Option<String>> = t.values[v]
                        .iter()
                        .map(|&x| Some(format!("c{}", bucket(x, th))))
                        .collect();
                    cm.push(meta(name, SemanticType::Categorical));
                    cols.push(Column::from_strings(name, SemanticType::Categorical, &vals));
                }
            }
        }
        let time_column = (!t.times.is_empty() || (ti > 0 && n == 0)).then(|| "time".to_string());
        if time_column.is_some() {
            let vals: Vec<Option<i64>> = t.times.iter().map(|&x| Some(EPOCH_MS + x)).collect();
            cm.push(meta("time", SemanticType::Timestamp));
            cols.push(Column::from_times("time", &vals));
        }
        metas.push(TableMeta {
            name: t.name.clone(),
            columns: cm,
            primary_key: Some("id".into()),
            time_column,
            derived_columns: Vec::new(),
        });
        columns.push(cols);
    }
    let schema = Schema { tables: metas, links };
    TemporalGraph::from_columns(schema, columns).map_err(|e| ScmError::Config(e.to_string()))
}

fn row_key(table: &str, row: usize) -> String {
    format!("{table}_{row}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    StaticBinary,
    StaticMulticlass,
    StaticRegression,
    /// `COUNT(child, 0, w) > 0`.
    TemporalBinary,
    /// `COUNT(child, 0, w)` as a regression target.
    TemporalCount,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 5] = [
        TaskFamily::StaticBinary,
        TaskFamily::StaticMulticlass,
        TaskFamily::StaticRegression,
        TaskFamily::TemporalBinary,
        TaskFamily::TemporalCount,
    ];

    pub fn is_temporal(self) -> bool {
        matches!(self, TaskFamily::TemporalBinary | TaskFamily::TemporalCount)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskFamily::StaticBinary => "static_binary",
            TaskFamily::StaticMulticlass => "static_multiclass",
            TaskFamily::StaticRegression => "static_regression",
            TaskFamily::TemporalBinary => "temporal_binary",
            TaskFamily::TemporalCount => "temporal_count",
        }
    }
}

/// How a static target was produced, for replaying it from the mechanisms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TargetRule {
    /// Bucketed at thresholds: 2 classes for binary, more for multiclass.
    Buckets {
        var: usize,
        thresholds: Vec<f64>,
    },
    Value {
        var: usize,
    },
    /// Counts in a window after the anchor; labels come from the event log.
    Window,
}

/// A task over an SCM database. `graph` is the database plus, for static tasks, the
/// target column on the entity table.
#[derive(Debug, Clone)]
pub struct ScmTask {
    pub family: TaskFamily,
    pub graph: TemporalGraph,
    pub plan: TaskPlan,
    pub rule: TargetRule,
    /// Ground-truth labeled examples. Static: one per entity at the horizon.
    /// Temporal: every entity at each of `anchors`.
    pub rows: Vec<TaskRow>,
    pub anchors: Vec<i64>,
}

pub fn choose_family(cfg: &ScmConfig, db: &ScmDatabase, rng: &mut ChaCha8Rng) -> TaskFamily {
    let w = cfg.task_weights;
    let temporal = if db.is_single_table() || db.latent.tables[1].parent != Some(0) {
        0.0
    } else {
        w.temporal
    };
    let opts = [
        (TaskFamily::StaticBinary, w.binary),
        (TaskFamily::StaticMulticlass, w.multiclass),
        (TaskFamily::StaticRegression, w.regression),
        (TaskFamily::TemporalBinary, temporal * 0.5),
        (TaskFamily::TemporalCount, temporal * 0.5),
    ];
    let total: f64 = opts.iter().map(|o| o.1).sum();
    let mut u = rng.gen_range(0.0..total);
    for (f, wt) in opts {
        if u < wt {
            return f;
        }
        u -= wt;
    }
    TaskFamily::StaticBinary
}

/// Samples a task whose label is a function of a latent causal variable.
pub fn sample_task(db: &ScmDatabase, cfg: &ScmConfig, seed: u64) -> Result<ScmTask, ScmError> {
    let mut rng = rng_for(&[seed, 0x7A5C]);
    let family = choose_family(cfg, db, &mut rng);
    sample_task_of(db, cfg, family, seed)
}

fn quantiles(values: &[f64], k: usize) -> Vec<f64> {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    (1..k)
        .map(|i| {
            let pos = i * s.len() / k;
            let lo = s[pos.saturating_sub(1)];
            let hi = s[pos.min(s.len() - 1)];
            0.5 * (lo + hi)
        })
        .collect()
}

/// Samples a task of a fixed family.
pub fn sample_task_of(db: &ScmDatabase, cfg: &ScmConfig, family: TaskFamily, seed: u64) -> Result<ScmTask, ScmError> {
    let mut rng = rng_for(&[seed, 0x7A5D]);
    let latent = &db.latent;
    let entity = &latent.tables[0];
    let n = entity.row_count();
    let end = latent.horizon_ms + EPOCH_MS;
    if family.is_temporal() {
        if db.is_single_table() || latent.tables[1].parent != Some(0) {
            return Err(ScmError::Task("temporal tasks need a child table of the entity".into()));
        }
        // Window sized for roughly one expected event per entity.
        let per_day = cfg.rows_per_entity / cfg.horizon_days as f64;
        let w = ((1.0 / per_day).round() as i64).clamp(1, cfg.horizon_days / 6);
        let query = match family {
            TaskFamily::TemporalBinary => format!("PREDICT COUNT(t1.*, 0, {w}, days) > 0 FOR EACH entity.id"),
            _ => format!("PREDICT COUNT(t1.*, 0, {w}, days) FOR EACH entity.id"),
        };
        let plan = compile_query(&query, &db.graph)?;
        let store = Store::build(db.graph.clone());
        let anchors: Vec<i64> = (1..=4).map(|k| end - k * w * MS_PER_DAY).rev().collect();
        let mut rows = Vec::with_capacity(n * anchors.len());
        for &a in &anchors {
            for e in 0..n as u32 {
                let y = compute_label(&store, &plan, e, a).map_err(|e| ScmError::Task(e.to_string()))?;
                rows.push(TaskRow::new(e, a, y));
            }
        }
        return Ok(ScmTask {
            family,
            graph: db.graph.clone(),
            plan,
            rule: TargetRule::Window,
            rows,
            anchors,
        });
    }
    let var = if db.is_single_table() {
        latent.target_vars[1]
    } else {
        latent.target_vars[usize::from(!rng.gen_bool(cfg.relational_target_prob))]
    };
    let values = &entity.values[var];
    let (rule, column) = match family {
        TaskFamily::StaticBinary => {
            let th = quantiles(values, 2);
            let col: Vec<Option<&str>> = values
                .iter()
                .map(|&x| Some(if bucket(x, &th) == 1 { "true" } else { "false" }))
                .collect();
            (
                TargetRule::Buckets { var, thresholds: th },
                Column::from_strings("target", SemanticType::Categorical, &col),
            )
        }
        TaskFamily::StaticMulticlass => {
            let k = rng.gen_range(3..=cfg.max_classes.max(3));
            let th = quantiles(values, k);
            let col: Vec<Option<String>> = values.iter().map(|&x| Some(format!("k{}", bucket(x, &th)))).collect();
            (
                TargetRule::Buckets { var, thresholds: th },
                Column::from_strings("target", SemanticType::Categorical, &col),
            )
        }
        _ => {
            let col: Vec<Option<f64>> = values.iter().map(|&x| Some(x)).collect();
            (TargetRule::Value { var }, Column::from_f64("target", &col))
        }
    };
    let graph = db
        .graph
        .with_extra_column(0, column)
        .map_err(|e| ScmError::Task(e.to_string()))?;
    let plan = compile_query("PREDICT entity.target FOR EACH entity.id", &graph)?;
    let store = Store::build(graph.clone());
    let rows = (0..n as u32)
        .map(|e| compute_label(&store, &plan, e, end).map(|y| TaskRow::new(e, end, y)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ScmError::Task(e.to_string()))?;
    Ok(ScmTask {
        family,
        graph,
        plan,
        rule,
        rows,
        anchors: vec![end],
    })
}

fn compile_query(q: &str, graph: &TemporalGraph) -> Result<TaskPlan, ScmError> {
    let ast = parse(q).map_err(|e| ScmError::Task(e.render(q)))?;
    compile(&ast, graph).map_err(|e| ScmError::Task(e.render(q)))
}

/// Labels of a static task recomputed from the stored noise by replaying every
/// mechanism, in the plan's label encoding.
pub fn recompute_static_labels(task: &ScmTask, latent: &LatentRecord) -> Option<Vec<f64>> {
    let vals = forward_values(latent);
    let entity = &vals[0];
    match &task.rule {
        TargetRule::Buckets { var, thresholds } => {
            let is_binary = task.plan.task_type == TaskType::Binary;
            Some(
                entity[*var]
                    .iter()
                    .map(|&x| {
                        let b = bucket(x, thresholds);
                        if is_binary {
                            b as f64
                        } else {
                            task.plan.class_index(&format!("k{b}")) as f64
                        }
                    })
                    .collect(),
            )
        }
        TargetRule::Value { var } => Some(entity[*var].clone()),
        TargetRule::Window => None,
    }
}

#[cfg(test)]
mod tests;
