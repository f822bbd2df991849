//! Side-by-side comparison of the model and the flattened-feature baseline on the
//! conjunction benchmark.

use serde::{Deserialize, Serialize};

use super::{auroc, MetricsError};
use crate::baseline::{dfs_flatten, linear_fit, linear_predict, FlatRow, FlatSpec};
use crate::colstore::Store;
use crate::icl_model::{Model, PredictOptions};
use crate::scm::make_conjunction;
use crate::taskgen::{holdout_split, TaskRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjunctionConfig {
    pub n_entities: usize,
    pub rows_per_entity: usize,
    /// Held-out share; the rest is model context and baseline training data.
    pub eval_fraction: f64,
    pub fanouts: Vec<usize>,
    pub dfs_depth: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ConjunctionConfig {
    fn default() -> Self {
        ConjunctionConfig {
            n_entities: 2000,
            rows_per_entity: 4,
            eval_fraction: 0.5,
            fanouts: vec![16, 16],
            dfs_depth: 1,
            epochs: 300,
            lr: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjunctionResult {
    pub seed: u64,
    pub model_auroc: f64,
    pub dfs_auroc: f64,
    pub n_context: usize,
    pub n_eval: usize,
}

fn flatten(store: &Store, spec: &FlatSpec, rows: &[TaskRow]) -> Result<Vec<FlatRow>, MetricsError> {
    rows.iter()
        .map(|r| dfs_flatten(store, spec, r.entity, r.anchor).map_err(MetricsError::from))
        .collect()
}

pub fn conjunction_benchmark(
    model: &Model,
    cfg: &ConjunctionConfig,
    seed: u64,
) -> Result<ConjunctionResult, MetricsError> {
    let task = make_conjunction(cfg.n_entities, cfg.rows_per_entity, seed)?;
    let split = holdout_split(&task.rows, cfg.eval_fraction, false, seed)?;
    let store = Store::build(task.graph);
    let truth: Vec<f64> = split.eval.iter().map(|r| r.target.expect("labeled")).collect();

    let opts = PredictOptions {
        fanouts: cfg.fanouts.clone(),
        seed,
        ..PredictOptions::default()
    };
    let preds = model.predict(&store, &task.plan, &split.context, &split.eval, &opts)?;
    let model_auroc = auroc(&preds.iter().map(|p| p.prediction).collect::<Vec<_>>(), &truth)?;

    let spec = FlatSpec::for_plan(&store.graph, &task.plan, cfg.dfs_depth)?;
    let train = flatten(&store, &spec, &split.context)?;
    let labels: Vec<f64> = split.context.iter().map(|r| r.target.expect("labeled")).collect();
    let lin = linear_fit(&train, &labels, cfg.epochs, cfg.lr, seed)?;
    let scores = flatten(&store, &spec, &split.eval)?
        .iter()
        .map(|r| linear_predict(&lin, r))
        .collect::<Result<Vec<_>, _>>()?;
    let dfs_auroc = auroc(&scores, &truth)?;

    Ok(ConjunctionResult {
        seed,
        model_auroc,
        dfs_auroc,
        n_context: split.context.len(),
        n_eval: split.eval.len(),
    })
}
