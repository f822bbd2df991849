use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde_json::json;

use super::{
    pql_error, AblateArgs, AblationFamily, BenchStoreArgs, CliError, EvaluateArgs, FinetuneArgs, IngestArgs, ModelSize,
    PredictArgs, PretrainArgs,
};
use crate::colstore::{ingest_dir, load_store, save_store, synthetic_store, EdgeType, IngestOptions, Store};
use crate::icl_model::{
    fine_tune, pretrain as run_pretrain, EnsembleOptions, FineTuneConfig, Model, ModelConfig, PredictOptions,
    Prediction, PretrainConfig, RunMode,
};
use crate::metrics::{conjunction_benchmark, run_ablation, AblationSpec, ConjunctionConfig, Sweep, TaskSource};
use crate::pql::{compile, parse, TaskPlan, TaskType};
use crate::relgraph::{NodeId, SchemaEdit};
use crate::taskgen::{
    generate_context, import_csv, infer_task_type, rows_from_raw, ContextConfig, TaskColumns, TaskRow,
};
use crate::time::{format_timestamp, parse_timestamp};
use crate::util::rng_for;

/// Report file inside directory outputs that holds wall-clock numbers and is left
/// out of replay comparisons.
pub(crate) const TIMING_FILE: &str = "timing.json";

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

fn anchor(text: Option<&str>) -> Result<Option<i64>, CliError> {
    text.map(|s| {
        parse_timestamp(s).ok_or_else(|| {
            CliError::Input(format!(
                "bad --anchor-time '{s}'; expected an ISO-8601 date or datetime"
            ))
        })
    })
    .transpose()
}

fn open_store(path: &Path) -> Result<Store, CliError> {
    load_store(path).map_err(|e| match e {
        crate::colstore::ColstoreError::Io { .. } => CliError::Input(e.to_string()),
        other => other.into(),
    })
}

/// Default anchor of static tasks: the latest timestamp in the database.
fn latest(store: &Store) -> i64 {
    store.graph.max_time().unwrap_or(0)
}

fn compile_query(store: &Store, query: &str) -> Result<TaskPlan, CliError> {
    let ast = parse(query).map_err(|e| pql_error(&e, query))?;
    compile(&ast, &store.graph).map_err(|e| pql_error(&e, query))
}

/// Loads a checkpoint, or falls back to a seeded untrained model with a warning.
fn load_model(checkpoint: Option<&Path>, fallback: ModelConfig, seed: u64) -> Result<Model, CliError> {
    match checkpoint {
        Some(dir) => Ok(Model::load(dir)?.0),
        None => {
            eprintln!("warning: no --checkpoint given; using an untrained model seeded with {seed}");
            Ok(Model::new(fallback, seed)?)
        }
    }
}

pub(crate) fn ingest(a: &IngestArgs) -> Result<(), CliError> {
    let edits: Vec<SchemaEdit> = match &a.schema_edits {
        Some(p) => serde_json::from_slice(&std::fs::read(p)?)?,
        None => Vec::new(),
    };
    if !a.csv_dir.is_dir() {
        return Err(CliError::Input(format!("{} is not a directory", a.csv_dir.display())));
    }
    let (store, report) = ingest_dir(&a.csv_dir, &edits, &IngestOptions::default())?;
    save_store(&store, &a.store)?;
    let mut report_path = a.store.as_os_str().to_os_string();
    report_path.push(".report.json");
    write_json(
        Path::new(&report_path),
        &json!({ "schema": store.graph.schema(), "ingest": report }),
    )?;
    for t in store.graph.tables() {
        println!("{}: {} rows", t.name(), t.row_count());
    }
    for l in &store.graph.schema().links {
        println!("link {}.{} -> {}", l.src_table, l.fkey_column, l.dst_table);
    }
    Ok(())
}

/// Context and prediction rows plus the plan they belong to.
struct Prepared {
    plan: TaskPlan,
    context: Vec<TaskRow>,
    predict: Vec<TaskRow>,
}

/// A query-mode prediction request.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRequest<'a> {
    pub query: &'a str,
    pub anchor_time: Option<&'a str>,
    /// Entity keys; every entity visible at the anchor when `None`.
    pub indices: Option<&'a [String]>,
    pub num_neighbors: &'a [usize],
    pub run_mode: RunMode,
    pub lag_timesteps: Option<usize>,
    pub seed: u64,
}

fn prepare_query(store: &Store, req: &QueryRequest<'_>) -> Result<Prepared, CliError> {
    let plan = compile_query(store, req.query)?;
    let t = match (anchor(req.anchor_time)?, plan.temporal) {
        (Some(t), _) => t,
        (None, true) => {
            return Err(CliError::Input("a temporal query needs --anchor-time".into()));
        }
        (None, false) => latest(store),
    };
    let table = store.graph.table(plan.entity.table_index);
    let entities: Vec<u32> = match req.indices {
        Some(keys) => keys
            .iter()
            .map(|k| {
                table.row_of_key(k.trim()).ok_or_else(|| {
                    CliError::Input(format!("entity key '{}' not found in '{}'", k.trim(), table.name()))
                })
            })
            .collect::<Result<_, _>>()?,
        None => (0..table.row_count() as u32)
            .filter(|&r| table.times()[r as usize] <= t)
            .collect(),
    };
    let lags = req.lag_timesteps.unwrap_or(if plan.temporal { 10 } else { 0 });
    let tt = generate_context(
        store,
        &plan,
        t,
        &entities,
        &ContextConfig {
            budget: ModelConfig::preset(req.run_mode).context_budget,
            lag_timesteps: lags,
            seed: req.seed,
            ..ContextConfig::default()
        },
    )?;
    Ok(Prepared {
        plan,
        context: tt.context,
        predict: tt.predict,
    })
}

fn predict_options(num_neighbors: &[usize], run_mode: RunMode, seed: u64) -> PredictOptions {
    PredictOptions {
        fanouts: num_neighbors.to_vec(),
        seed,
        context_budget: Some(ModelConfig::preset(run_mode).context_budget),
        ..PredictOptions::default()
    }
}

/// Compiles a query, generates its context and predicts.
pub fn predict_query(
    model: &Model,
    store: &Store,
    req: &QueryRequest<'_>,
) -> Result<(TaskPlan, Vec<Prediction>), CliError> {
    let p = prepare_query(store, req)?;
    let preds = model.predict(
        store,
        &p.plan,
        &p.context,
        &p.predict,
        &predict_options(req.num_neighbors, req.run_mode, req.seed),
    )?;
    Ok((p.plan, preds))
}

fn prepare_table(a: &PredictArgs, store: &Store, ctx_path: &Path, pred_path: &Path) -> Result<Prepared, CliError> {
    let graph = &store.graph;
    let et_name = a
        .entity_table
        .as_deref()
        .ok_or_else(|| CliError::Input("task-table mode needs --entity-table".into()))?;
    let et = graph
        .table_index(et_name)
        .ok_or_else(|| CliError::Input(format!("unknown entity table '{et_name}'")))?;
    let entity_column = match &a.entity_column {
        Some(c) => c.clone(),
        None => graph
            .table(et)
            .primary_key()
            .map(|c| c.name.clone())
            .ok_or_else(|| CliError::Input(format!("'{et_name}' has no primary key; pass --entity-column")))?,
    };
    let default_anchor = anchor(a.anchor_time.as_deref())?.or(if a.time_column.is_none() {
        Some(latest(store))
    } else {
        None
    });
    let read = |path: &Path, target: Option<String>| {
        let f = std::fs::File::open(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let cols = TaskColumns {
            entity: entity_column.clone(),
            time: a.time_column.clone(),
            target,
        };
        Ok::<_, CliError>(import_csv(
            f,
            &path.display().to_string(),
            graph,
            et,
            &cols,
            default_anchor,
        )?)
    };
    let raw_ctx = read(ctx_path, Some(a.target_column.clone()))?;
    let raw_pred = read(pred_path, None)?;
    let targets: Vec<&str> = raw_ctx.iter().filter_map(|r| r.target.as_deref()).collect();
    let task_type = infer_task_type(&targets);
    let (context, classes) = rows_from_raw(&raw_ctx, task_type);
    let (predict, _) = rows_from_raw(&raw_pred, task_type);
    let plan = TaskPlan::provided(graph, et, task_type, classes, a.time_column.is_some());
    Ok(Prepared { plan, context, predict })
}

fn prediction_line(store: &Store, plan: &TaskPlan, p: &Prediction) -> serde_json::Value {
    let table = store.graph.table(plan.entity.table_index);
    let key = table
        .key_of_row(p.entity as usize)
        .map_or_else(|| p.entity.to_string(), str::to_string);
    let mut v = json!({
        "entity": key,
        "anchor_time": format_timestamp(p.anchor_time),
        "prediction": p.prediction,
    });
    match plan.task_type {
        TaskType::Binary => {
            v["label"] = json!(plan.classes[usize::from(p.prediction >= 0.5)]);
        }
        TaskType::Multiclass => {
            v["label"] = json!(plan.classes.get(p.prediction as usize));
        }
        TaskType::Regression => {}
    }
    if let Some(probs) = &p.probabilities {
        v["probabilities"] = plan
            .classes
            .iter()
            .zip(probs)
            .map(|(c, q)| (c.clone(), json!(q)))
            .collect();
    }
    v["embedding"] = json!(p.embedding);
    v
}

pub(crate) fn predict(a: &PredictArgs) -> Result<(), CliError> {
    let store = open_store(&a.store)?;
    let model = load_model(a.checkpoint.as_deref(), ModelConfig::preset(a.run_mode), a.seed)?;
    let prepared = match (&a.query, &a.context_csv, &a.pred_csv) {
        (Some(q), None, None) => prepare_query(
            &store,
            &QueryRequest {
                query: q,
                anchor_time: a.anchor_time.as_deref(),
                indices: a.indices.as_deref(),
                num_neighbors: &a.num_neighbors,
                run_mode: a.run_mode,
                lag_timesteps: a.lag_timesteps,
                seed: a.seed,
            },
        )?,
        (None, Some(c), Some(p)) => prepare_table(a, &store, c, p)?,
        _ => {
            return Err(CliError::Input(
                "pass either --query or both --context-csv and --pred-csv".into(),
            ))
        }
    };
    eprintln!(
        "{}",
        serde_json::to_string(
            &json!({ "resolved": a, "task_type": prepared.plan.task_type, "context_rows": prepared.context.len() })
        )?
    );
    let opts = predict_options(&a.num_neighbors, a.run_mode, a.seed);
    let start = Instant::now();
    let preds = if a.estimators > 1 || a.column_shuffle || a.class_shuffle {
        let ens = EnsembleOptions {
            num_estimators: a.estimators.max(1),
            column_shuffle: a.column_shuffle,
            class_shuffle: a.class_shuffle,
            hop_list: None,
        };
        model
            .ensemble_predict(
                &store,
                &prepared.plan,
                &prepared.context,
                &prepared.predict,
                &opts,
                &ens,
            )?
            .predictions
    } else {
        model.predict(&store, &prepared.plan, &prepared.context, &prepared.predict, &opts)?
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(&a.out)?);
    for p in &preds {
        serde_json::to_writer(&mut w, &prediction_line(&store, &prepared.plan, p))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    eprintln!("{} predictions in {:.2}s", preds.len(), start.elapsed().as_secs_f64());
    Ok(())
}

fn model_config(size: ModelSize) -> ModelConfig {
    match size {
        ModelSize::Toy => ModelConfig::toy(),
        ModelSize::Fast => ModelConfig::preset(RunMode::Fast),
        ModelSize::Normal => ModelConfig::preset(RunMode::Normal),
        ModelSize::Best => ModelConfig::preset(RunMode::Best),
    }
}

pub(crate) fn pretrain(a: &PretrainArgs) -> Result<(), CliError> {
    let mut model = Model::new(model_config(a.model), a.seed)?;
    let cfg = PretrainConfig {
        steps: a.steps,
        seed: a.seed,
        checkpoint_dir: Some(a.out.clone()),
        checkpoint_every: a.checkpoint_every,
        ..PretrainConfig::default()
    };
    let report = run_pretrain(&mut model, &cfg)?;
    model.save(
        &a.out,
        json!({ "seed": a.seed, "step": a.steps, "pretrain_config_hash": cfg.hash() }),
    )?;
    write_json(
        &a.out.join(TIMING_FILE),
        &json!({
            "eval_before": report.eval_before,
            "eval_after": report.eval_after,
            "seconds": report.seconds,
        }),
    )?;
    println!(
        "pretrained {} steps in {:.1}s; eval loss {:.4} -> {:.4}",
        a.steps, report.seconds, report.eval_before, report.eval_after
    );
    Ok(())
}

pub(crate) fn finetune(a: &FinetuneArgs) -> Result<(), CliError> {
    let store = open_store(&a.store)?;
    let plan = compile_query(&store, &a.query)?;
    let t = match (anchor(a.anchor_time.as_deref())?, plan.temporal) {
        (Some(t), _) => t,
        (None, true) => return Err(CliError::Input("a temporal query needs --anchor-time".into())),
        (None, false) => latest(&store),
    };
    let base = load_model(a.checkpoint.as_deref(), ModelConfig::toy(), a.seed)?;
    let lags = a.lag_timesteps.unwrap_or(if plan.temporal { 10 } else { 0 });
    let rows = generate_context(
        &store,
        &plan,
        t,
        &[],
        &ContextConfig {
            budget: a.rows,
            lag_timesteps: lags,
            seed: a.seed,
            ..ContextConfig::default()
        },
    )?
    .context;
    let cfg = FineTuneConfig {
        steps: a.steps,
        seed: a.seed,
        fanouts: a.num_neighbors.clone(),
        ..FineTuneConfig::default()
    };
    let (tuned, report) = fine_tune(&base, &store, &plan, &rows, &cfg)?;
    tuned.save(
        &a.out,
        json!({ "seed": a.seed, "query": a.query, "best_step": report.best_step }),
    )?;
    write_json(&a.out.join(TIMING_FILE), &serde_json::to_value(&report)?)?;
    println!(
        "fine-tuned on {} rows in {:.1}s; validation loss {:.4} -> {:.4} (kept step {})",
        rows.len(),
        report.seconds,
        report.base_validation,
        report.best_validation,
        report.best_step
    );
    Ok(())
}

pub(crate) fn evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    let model = load_model(a.checkpoint.as_deref(), ModelConfig::toy(), 0)?;
    let cfg = ConjunctionConfig {
        n_entities: a.entities,
        fanouts: a.num_neighbors.clone(),
        ..ConjunctionConfig::default()
    };
    println!("{:>6}  {:>11}  {:>9}", "seed", "model AUROC", "DFS AUROC");
    let mut results = Vec::new();
    for &seed in &a.seeds {
        let r = conjunction_benchmark(&model, &cfg, seed)?;
        println!("{:>6}  {:>11.4}  {:>9.4}", seed, r.model_auroc, r.dfs_auroc);
        results.push(r);
    }
    write_json(
        &a.out,
        &json!({ "benchmark": "conjunction", "config": cfg, "results": results }),
    )?;
    Ok(())
}

pub(crate) fn ablate(a: &AblateArgs) -> Result<(), CliError> {
    let sweep = Sweep::parse(&a.sweep).ok_or_else(|| {
        let names: Vec<&str> = Sweep::ALL.iter().map(|s| s.as_str()).collect();
        CliError::Input(format!("unknown sweep '{}' ({})", a.sweep, names.join("|")))
    })?;
    let source = match a.family {
        AblationFamily::LongMemory => TaskSource::long_memory(),
        AblationFamily::MultiTable => TaskSource::multi_table(),
        AblationFamily::Conjunction => TaskSource::Conjunction {
            n_entities: 400,
            rows_per_entity: 4,
        },
    };
    let model = load_model(a.checkpoint.as_deref(), ModelConfig::toy(), 0)?;
    let spec = AblationSpec {
        grid: a.grid.clone().unwrap_or_else(|| sweep.default_grid()),
        seeds: a.seeds.clone(),
        context_size: a.context_size,
        eval_rows: a.eval_rows,
        fanout: a.fanout,
        depth: a.depth,
        ..AblationSpec::new(sweep, source)
    };
    let report = run_ablation(&model, &spec)?;
    report.write_outputs(&a.out)?;
    println!(
        "{} ({}), fingerprint {}",
        sweep.as_str(),
        report.metric,
        report.fingerprint
    );
    for p in &report.points {
        println!("  x={:<8} {:.4} ± {:.4}", p.x, p.mean, p.stderr);
    }
    Ok(())
}

/// Throughput of `neighbors_before` from random parents at random cutoffs.
pub fn bench_lookups(store: &Store, lookups: usize, k: usize, seed: u64) -> (f64, u64) {
    let n_parents = store.graph.table(0).row_count();
    let horizon = store.graph.max_time().unwrap_or(0);
    let mut rng = rng_for(&[seed, 0xBE7C]);
    let queries: Vec<(NodeId, i64)> = (0..lookups)
        .map(|_| (NodeId::new(0, rng.gen_range(0..n_parents)), rng.gen_range(0..=horizon)))
        .collect();
    let rev = EdgeType::new(0, true);
    let start = Instant::now();
    let mut found = 0u64;
    for (node, t) in queries {
        found += store
            .index
            .neighbors_before(node, rev, t, k)
            .map_or(0, |v| v.len() as u64);
    }
    (lookups as f64 / start.elapsed().as_secs_f64(), found)
}

pub(crate) fn bench_store(a: &BenchStoreArgs) -> Result<(), CliError> {
    if a.parents == 0 || a.lookups == 0 {
        return Err(CliError::Input("--parents and --lookups must be positive".into()));
    }
    let start = Instant::now();
    let store = synthetic_store(a.parents, a.edges, a.seed);
    let build = start.elapsed().as_secs_f64();
    let (rate, found) = bench_lookups(&store, a.lookups, a.k, a.seed);
    println!(
        "{} edges built in {:.1}s; {:.0} neighbors_before lookups/sec (k = {}, {} neighbors returned)",
        a.edges, build, rate, a.k, found
    );
    write_json(
        &a.out,
        &json!({
            "edges": a.edges,
            "parents": a.parents,
            "lookups": a.lookups,
            "k": a.k,
            "build_seconds": build,
            "lookups_per_second": rate,
            "neighbors_returned": found,
        }),
    )?;
    Ok(())
}
