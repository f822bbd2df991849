//! Point-in-time audit shared by the leakage suite and the acceptance run.

use rand::Rng;
use relicl::colstore::{AccessRecorder, Store};
use relicl::icl_model::{Model, ModelConfig, PredictOptions, Prediction};
use relicl::pql::{compile, parse, TaskPlan};
use relicl::relgraph::NodeId;
use relicl::sampler::{sample_subgraph, SampleOptions};
use relicl::scm::{sample_database, sample_task_of, ScmConfig, TaskFamily};
use relicl::taskgen::{compute_label, generate_context, ContextConfig, TaskgenError};
use relicl::time::MS_PER_DAY;
use relicl::util::rng_for;

use super::{shop, Order};

pub struct Case {
    pub name: String,
    pub store: Store,
    pub plan: TaskPlan,
    /// Anchors are drawn uniformly from this range (ms).
    pub anchors: (i64, i64),
}

pub fn shop_cases() -> Vec<Case> {
    let mut rng = rng_for(&[0x5409]);
    let joined: Vec<i64> = (0..60).map(|_| rng.gen_range(0..40)).collect();
    let orders: Vec<Order> = (0..900)
        .map(|_| Order {
            user: Some(rng.gen_range(0..60)),
            day: rng.gen_range(0..120),
            price: Some(rng.gen_range(1.0..100.0)),
        })
        .collect();
    let queries = [
        "PREDICT COUNT(orders.*, 0, 14, days) > 0 FOR EACH users.user_id",
        "PREDICT SUM(orders.price, 0, 30, days) FOR EACH users.user_id",
        "PREDICT MAX(orders.price, 2, 20, days, WHERE price > 40) FOR EACH users.user_id",
        "PREDICT COUNT(orders.*, 0, 7, days) >= 2 FOR EACH users.user_id",
    ];
    queries
        .iter()
        .map(|q| {
            let store = shop(&joined, &orders);
            let plan = compile(&parse(q).unwrap(), &store.graph).unwrap();
            Case {
                name: q.to_string(),
                store,
                plan,
                anchors: (20 * MS_PER_DAY, 110 * MS_PER_DAY),
            }
        })
        .collect()
}

fn scm_cases() -> Vec<Case> {
    let cfg = ScmConfig {
        n_entities: 60,
        rows_per_entity: 6.0,
        ..ScmConfig::default()
    };
    let mut out = Vec::new();
    for seed in 0..3u64 {
        let db = sample_database(&cfg, seed).unwrap();
        for family in TaskFamily::ALL {
            let task = sample_task_of(&db, &cfg, family, seed).unwrap();
            let lo = task.graph.min_time().unwrap_or(0);
            let hi = task.graph.max_time().unwrap_or(0);
            out.push(Case {
                name: format!("scm seed {seed} {}", family.as_str()),
                store: Store::build(task.graph),
                plan: task.plan,
                anchors: (lo + (hi - lo) / 4, hi),
            });
        }
    }
    out
}

fn context_config(seed: u64) -> ContextConfig {
    ContextConfig {
        budget: 24,
        lag_timesteps: 2,
        seed,
        ..ContextConfig::default()
    }
}

fn predict_opts(seed: u64) -> PredictOptions {
    PredictOptions {
        seed,
        ..PredictOptions::with_fanouts(&[4, 4])
    }
}

/// Predictions keyed by entity primary key instead of row number, which changes when
/// earlier rows of a timed entity table are deleted.
fn keyed(store: &Store, plan: &TaskPlan, preds: Vec<Prediction>) -> Vec<(String, Prediction)> {
    let table = store.graph.table(plan.entity.table_index);
    preds
        .into_iter()
        .map(|mut p| {
            let key = table.key_of_row(p.entity as usize).unwrap().to_string();
            p.entity = 0;
            (key, p)
        })
        .collect()
}

fn end_to_end(
    model: &Model,
    store: &Store,
    plan: &TaskPlan,
    key: &str,
    anchor: i64,
    seed: u64,
) -> Option<Vec<(String, Prediction)>> {
    let entity = store.graph.table(plan.entity.table_index).row_of_key(key).unwrap();
    let table = generate_context(store, plan, anchor, &[entity], &context_config(seed)).unwrap();
    if table.context.is_empty() {
        return None;
    }
    let preds = model
        .predict(store, plan, &table.context, &table.predict, &predict_opts(seed))
        .unwrap();
    Some(keyed(store, plan, preds))
}

/// Counts from an audit run; `violations` lists every failed check.
#[derive(Debug, Default)]
pub struct AuditReport {
    pub draws: usize,
    pub temporal_labels: usize,
    pub predictions: usize,
    pub truncations: usize,
    pub skipped: usize,
    pub violations: Vec<String>,
}

impl AuditReport {
    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        if !ok {
            self.violations.push(what());
        }
    }
}

/// Draws `n_draws` (plan, entity, anchor) triples over shop and SCM databases and
/// audits the sampler, the label, context generation and the model; every eighth
/// draw also compares end-to-end predictions against a store with the future
/// deleted.
pub fn run_audit(n_draws: usize) -> AuditReport {
    let model = Model::new(ModelConfig::toy(), 11).unwrap();
    let cases: Vec<Case> = shop_cases().into_iter().chain(scm_cases()).collect();
    let mut rng = rng_for(&[0x1EA4]);
    let mut rep = AuditReport::default();
    while rep.draws < n_draws {
        let case = &cases[rep.draws % cases.len()];
        let (store, plan) = (&case.store, &case.plan);
        let et = plan.entity.table_index;
        let entity = rng.gen_range(0..store.graph.table(et).row_count()) as u32;
        let anchor = rng.gen_range(case.anchors.0..=case.anchors.1);
        let root = NodeId::new(et, entity as usize);
        if store.graph.node_time(root) > anchor {
            continue;
        }
        rep.draws += 1;
        let seed = rep.draws as u64;
        let rec = AccessRecorder::new(store);
        let name = &case.name;

        sample_subgraph(&rec, root, anchor, &SampleOptions::new(&[8, 8])).unwrap();
        let t = rec.max_input_time();
        rep.check(t <= anchor, || format!("{name}: sampler read {t} > {anchor}"));
        rep.check(rec.label_reads() == 0, || format!("{name}: sampler read labels"));

        if plan.temporal {
            rec.reset();
            compute_label(&rec, plan, entity, anchor).unwrap();
            let t = rec.min_label_time();
            rep.check(rec.input_reads() == 0, || format!("{name}: label read inputs"));
            rep.check(t > anchor, || format!("{name}: label event at {t} <= {anchor}"));
            rep.temporal_labels += usize::from(rec.label_reads() > 0);
        }

        rec.reset();
        let table = match generate_context(&rec, plan, anchor, &[entity], &context_config(seed)) {
            Ok(t) => t,
            Err(TaskgenError::InsufficientHistory { .. }) => {
                rep.skipped += 1;
                continue;
            }
            Err(e) => panic!("{name}: {e}"),
        };
        let (ti, tl) = (rec.max_input_time(), rec.max_label_time());
        rep.check(ti <= anchor, || format!("{name}: lag input {ti} > {anchor}"));
        rep.check(tl <= anchor, || format!("{name}: context label {tl} > {anchor}"));
        rep.check(table.context.iter().all(|r| r.anchor <= anchor), || {
            format!("{name}: context anchor after {anchor}")
        });
        if table.context.is_empty() {
            continue;
        }

        rec.reset();
        model
            .predict(&rec, plan, &table.context, &table.predict, &predict_opts(seed))
            .unwrap();
        let t = rec.max_input_time();
        rep.check(t <= anchor, || format!("{name}: model read {t} > {anchor}"));
        rep.check(rec.label_reads() == 0, || format!("{name}: model read labels"));
        rep.check(rec.input_reads() > 0, || format!("{name}: model read nothing"));
        rep.predictions += 1;

        if rep.draws % 8 == 0 {
            let key = store.graph.table(et).key_of_row(entity as usize).unwrap().to_string();
            let full = end_to_end(&model, store, plan, &key, anchor, seed).unwrap();
            let cut = Store::build(store.graph.truncate_after(anchor));
            let truncated = end_to_end(&model, &cut, plan, &key, anchor, seed).unwrap();
            let same = full.len() == truncated.len()
                && full
                    .iter()
                    .zip(&truncated)
                    .all(|((ka, a), (kb, b))| ka == kb && a.prediction.to_bits() == b.prediction.to_bits() && a == b);
            rep.check(same, || {
                format!("{name}: prediction changed after deleting rows past {anchor}")
            });
            rep.truncations += 1;
        }
    }
    rep
}
