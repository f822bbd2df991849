//! Robustness sweeps of a fixed model over synthetic tasks.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{auroc, mae, mrr, ranking, MetricsError};
use crate::colstore::{Column, Store};
use crate::icl_model::{budget_context, Model, PredictOptions};
use crate::pql::TaskPlan;
use crate::pql::TaskType;
use crate::relgraph::TemporalGraph;
use crate::scm::{make_interaction, sample_database, sample_task_of, InteractionConfig, ScmConfig, TaskFamily};
use crate::taskgen::{holdout_split, TaskRow};
use crate::util::rng_for;

/// The quantity varied along the x axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    ContextSize,
    /// Number of hops, each with `AblationSpec::fanout`.
    Depth,
    /// Per-hop cap at two hops.
    Fanout,
    FeatureDrop,
    EdgeDrop,
    NoiseColumns,
}

impl Sweep {
    pub const ALL: [Sweep; 6] = [
        Sweep::ContextSize,
        Sweep::Depth,
        Sweep::Fanout,
        Sweep::FeatureDrop,
        Sweep::EdgeDrop,
        Sweep::NoiseColumns,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Sweep::ContextSize => "context_size",
            Sweep::Depth => "depth",
            Sweep::Fanout => "fanout",
            Sweep::FeatureDrop => "feature_drop",
            Sweep::EdgeDrop => "edge_drop",
            Sweep::NoiseColumns => "noise_columns",
        }
    }

    pub fn parse(s: &str) -> Option<Sweep> {
        Sweep::ALL.into_iter().find(|w| w.as_str() == s)
    }

    pub fn default_grid(self) -> Vec<f64> {
        match self {
            Sweep::ContextSize => vec![8.0, 16.0, 32.0, 64.0, 128.0, 256.0],
            Sweep::Depth => (0..=6).map(f64::from).collect(),
            Sweep::Fanout => vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0],
            Sweep::FeatureDrop | Sweep::EdgeDrop => vec![0.0, 0.25, 0.5, 0.75, 1.0],
            Sweep::NoiseColumns => vec![0.0, 2.0, 4.0, 8.0, 16.0],
        }
    }
}

/// Where the evaluated tasks come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSource {
    Scm { config: ScmConfig, family: TaskFamily },
    Conjunction { n_entities: usize, rows_per_entity: usize },
}

impl TaskSource {
    /// Static binary target that is a noisy mean over many child rows, so more
    /// sampled neighbors keep helping.
    pub fn long_memory() -> TaskSource {
        TaskSource::Scm {
            config: ScmConfig {
                n_entities: 400,
                child_tables: (1, 1),
                chain_prob: 0.0,
                rows_per_entity: 40.0,
                features: (1, 2),
                noise_scale: 1.0,
                categorical_prob: 0.0,
                noise_columns: 0,
                relational_target_prob: 1.0,
                ..ScmConfig::default()
            },
            family: TaskFamily::StaticBinary,
        }
    }

    /// Static binary target on a database with two child tables.
    pub fn multi_table() -> TaskSource {
        TaskSource::Scm {
            config: ScmConfig {
                n_entities: 400,
                child_tables: (2, 2),
                rows_per_entity: 8.0,
                noise_columns: 0,
                relational_target_prob: 1.0,
                ..ScmConfig::default()
            },
            family: TaskFamily::StaticBinary,
        }
    }

    fn build(&self, seed: u64) -> Result<(TemporalGraph, TaskPlan, Vec<TaskRow>, bool), MetricsError> {
        match self {
            TaskSource::Scm { config, family } => {
                let db = sample_database(config, seed)?;
                let task = sample_task_of(&db, config, *family, seed)?;
                Ok((task.graph, task.plan, task.rows, family.is_temporal()))
            }
            TaskSource::Conjunction {
                n_entities,
                rows_per_entity,
            } => {
                let cfg = InteractionConfig {
                    n_entities: *n_entities,
                    rows_per_entity: (*rows_per_entity, *rows_per_entity),
                    distractors: 0,
                    horizon_days: 360,
                };
                let task = make_interaction(&cfg, seed)?;
                Ok((task.graph, task.plan, task.rows, false))
            }
        }
    }
}

/// A full sweep definition. Serialized, it identifies the run together with the
/// model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub sweep: Sweep,
    pub grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub source: TaskSource,
    /// Context rows when the context size is not swept.
    pub context_size: usize,
    pub eval_rows: usize,
    /// Held-out share of the labeled rows before capping at `eval_rows`.
    pub eval_fraction: f64,
    /// Per-hop cap when the fanout is not swept.
    pub fanout: usize,
    /// Hops when the depth is not swept.
    pub depth: usize,
}

impl AblationSpec {
    pub fn new(sweep: Sweep, source: TaskSource) -> AblationSpec {
        AblationSpec {
            sweep,
            grid: sweep.default_grid(),
            seeds: vec![0, 1, 2],
            source,
            context_size: 128,
            eval_rows: 128,
            eval_fraction: 0.3,
            fanout: 16,
            depth: 2,
        }
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        let bad = |m: String| Err(MetricsError::Config(m));
        if self.grid.is_empty() {
            return bad("empty grid".into());
        }
        if self.seeds.len() < 3 {
            return bad(format!(
                "{} seeds; at least 3 are needed for dispersion",
                self.seeds.len()
            ));
        }
        if self.eval_rows == 0 || self.context_size == 0 {
            return bad("context_size and eval_rows must be positive".into());
        }
        for &x in &self.grid {
            let ok = match self.sweep {
                Sweep::FeatureDrop | Sweep::EdgeDrop => (0.0..=1.0).contains(&x),
                Sweep::ContextSize | Sweep::Fanout => x >= 1.0 && x.fract() == 0.0,
                Sweep::Depth | Sweep::NoiseColumns => x >= 0.0 && x.fract() == 0.0,
            };
            if !ok {
                return bad(format!("grid value {x} is invalid for {}", self.sweep.as_str()));
            }
        }
        Ok(())
    }

    /// Hash of the ablation settings and the model's configuration and parameters.
    pub fn fingerprint(&self, model: &Model) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("spec serializes"));
        h.update(serde_json::to_vec(&model.config).expect("config serializes"));
        model.params.write_tensors(&mut h).expect("hashing cannot fail");
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One evaluation of one seed at one grid value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub x: f64,
    pub seed: u64,
    pub fingerprint: String,
}

/// Aggregate over seeds at one grid value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub x: f64,
    pub mean: f64,
    /// Sample standard deviation across seeds.
    pub std: f64,
    pub stderr: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub spec: AblationSpec,
    pub metric: String,
    pub fingerprint: String,
    pub points: Vec<AblationPoint>,
    pub reports: Vec<EvalReport>,
}

impl AblationReport {
    /// Writes `ablation.json`, per-run `ablation.csv` and `plot.csv` (x, y, stderr).
    pub fn write_outputs(&self, dir: &Path) -> Result<(), MetricsError> {
        std::fs::create_dir_all(dir)?;
        let mut f = std::fs::File::create(dir.join("ablation.json"))?;
        serde_json::to_writer_pretty(&mut f, self).map_err(std::io::Error::from)?;
        f.write_all(b"\n")?;
        let mut w = csv::Writer::from_path(dir.join("ablation.csv"))?;
        for r in &self.reports {
            w.serialize(r)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("plot.csv"))?;
        w.write_record(["x", "y", "stderr"])?;
        for p in &self.points {
            w.write_record([p.x.to_string(), p.mean.to_string(), p.stderr.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Appends `count` uniform-noise numerical columns to every table.
fn add_noise_columns(graph: &TemporalGraph, count: usize, seed: u64) -> Result<TemporalGraph, MetricsError> {
    let mut g = graph.clone();
    for t in 0..graph.tables().len() {
        let n = graph.table(t).row_count();
        for k in 0..count {
            let mut rng = rng_for(&[seed, 0x401E, t as u64, k as u64]);
            let values: Vec<Option<f64>> = (0..n).map(|_| Some(rng.gen_range(-1.0..1.0))).collect();
            g = g
                .with_extra_column(t, Column::from_f64(&format!("noise_{k}"), &values))
                .map_err(|e| MetricsError::Config(e.to_string()))?;
        }
    }
    Ok(g)
}

/// Scores predictions with the task type's metric.
fn score(
    plan: &TaskPlan,
    preds: &[crate::icl_model::Prediction],
    eval: &[TaskRow],
) -> Result<(&'static str, f64), MetricsError> {
    let truth: Vec<f64> = eval.iter().map(|r| r.target.expect("eval rows are labeled")).collect();
    match plan.task_type {
        TaskType::Binary => Ok((
            "auroc",
            auroc(&preds.iter().map(|p| p.prediction).collect::<Vec<_>>(), &truth)?,
        )),
        TaskType::Multiclass => {
            let ranks: Vec<Vec<usize>> = preds
                .iter()
                .map(|p| ranking(p.probabilities.as_deref().unwrap_or(&[])))
                .collect();
            let t: Vec<usize> = truth.iter().map(|&y| y as usize).collect();
            Ok(("mrr", mrr(&ranks, &t)?))
        }
        TaskType::Regression => Ok((
            "mae",
            mae(&preds.iter().map(|p| p.prediction).collect::<Vec<_>>(), &truth)?,
        )),
    }
}

fn dispersion(x: f64, per_seed: Vec<f64>) -> AblationPoint {
    let n = per_seed.len() as f64;
    let mean = per_seed.iter().sum::<f64>() / n;
    let var = if per_seed.len() > 1 {
        per_seed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    AblationPoint {
        x,
        mean,
        std: var.sqrt(),
        stderr: (var / n).sqrt(),
        per_seed,
    }
}

/// Evaluates `model` at every grid value for every seed. Each seed fixes one
/// database, split and sampling stream shared by all grid values, so points differ
/// only by the swept quantity. Feature drop touches context rows only.
pub fn run_ablation(model: &Model, spec: &AblationSpec) -> Result<AblationReport, MetricsError> {
    spec.validate()?;
    let fingerprint = spec.fingerprint(model);
    let mut metric = "";
    let mut per_x: Vec<Vec<f64>> = vec![Vec::new(); spec.grid.len()];
    let mut reports = Vec::new();
    for &seed in &spec.seeds {
        let (graph, plan, rows, temporal) = spec.source.build(seed)?;
        let labeled: Vec<TaskRow> = rows.into_iter().filter(|r| r.target.is_some()).collect();
        let split = holdout_split(&labeled, spec.eval_fraction, temporal, seed)?;
        let eval = budget_context(&split.eval, spec.eval_rows, seed ^ 0xE7A1);
        let base_store = (spec.sweep != Sweep::NoiseColumns).then(|| Store::build(graph.clone()));
        let eval_point = |x: f64| -> Result<(&'static str, f64), MetricsError> {
            let noisy;
            let store = match &base_store {
                Some(s) => s,
                None => {
                    noisy = Store::build(add_noise_columns(&graph, x as usize, seed)?);
                    &noisy
                }
            };
            let mut opts = PredictOptions {
                fanouts: vec![spec.fanout; spec.depth],
                seed,
                context_budget: Some(spec.context_size),
                ..PredictOptions::default()
            };
            match spec.sweep {
                Sweep::ContextSize => opts.context_budget = Some(x as usize),
                Sweep::Depth => opts.fanouts = vec![spec.fanout; x as usize],
                Sweep::Fanout => opts.fanouts = vec![x as usize; 2],
                Sweep::FeatureDrop => opts.feature_drop = x,
                Sweep::EdgeDrop => opts.edge_drop = x,
                Sweep::NoiseColumns => {}
            }
            let preds = model.predict(store, &plan, &split.context, &eval, &opts)?;
            score(&plan, &preds, &eval)
        };
        // Grid points in parallel; results are collected in grid order.
        let workers = std::thread::available_parallelism()
            .map_or(1, |n| n.get())
            .min(spec.grid.len());
        let results: Vec<Result<(&'static str, f64), MetricsError>> = if workers <= 1 {
            spec.grid.iter().map(|&x| eval_point(x)).collect()
        } else {
            let per = spec.grid.len().div_ceil(workers);
            std::thread::scope(|sc| {
                let handles: Vec<_> = spec
                    .grid
                    .chunks(per)
                    .map(|xs| {
                        let eval_point = &eval_point;
                        sc.spawn(move || xs.iter().map(|&x| eval_point(x)).collect::<Vec<_>>())
                    })
                    .collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("ablation worker panicked"))
                    .collect()
            })
        };
        for (i, (&x, r)) in spec.grid.iter().zip(results).enumerate() {
            let (name, value) = r?;
            metric = name;
            per_x[i].push(value);
            reports.push(EvalReport {
                task: format!("{}/seed{seed}", plan.query),
                metric: name.to_string(),
                value,
                n: eval.len(),
                x,
                seed,
                fingerprint: fingerprint.clone(),
            });
        }
    }
    let points = spec.grid.iter().zip(per_x).map(|(&x, v)| dispersion(x, v)).collect();
    Ok(AblationReport {
        spec: spec.clone(),
        metric: metric.to_string(),
        fingerprint,
        points,
        reports,
    })
}
