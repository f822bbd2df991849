//! The relational in-context learning network.
//!
//! Every context and prediction example is a temporal subgraph around an entity.
//! Cells become tokens; a table encoder alternates attention across the tokens of a
//! row and across rows of the same column; a graph encoder attends along sampled
//! key links; a cross-sample stage lets prediction rows read the labeled context;
//! a kernel head turns that into class probabilities or a regression value.

mod gradcheck;
mod network;
mod tokens;
mod train;


use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, CheckpointError, ParamStore, Tape};
use crate::colstore::NeighborAccess;
use crate::pql::{TaskPlan, TaskType};
use crate::sampler::{SampleError, SampleOptions, SamplePolicy};
use crate::scm::ScmError;
use crate::taskgen::TaskRow;
use crate::util::rng_for;

use network::Net;
use tokens::{build_episode, Episode, EpisodeOptions};

pub use gradcheck::{gradient_check, GradCheckReport, GroupError, FD_STEP};
pub use train::{
    eval_suite_loss, fine_tune, pretrain, pretrain_until, FineTuneConfig, FineTuneReport, PretrainConfig,
    PretrainReport,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("the context is empty")]
    EmptyContext,
    #[error("every context row needs a label")]
    UnlabeledContext,
    #[error("class dictionary mismatch: {0}")]
    ClassMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Scm(#[from] ScmError),
}

/// Latency/accuracy preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    #[default]
    Fast,
    Normal,
    Best,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Fast => "fast",
            RunMode::Normal => "normal",
            RunMode::Best => "best",
        }
    }
}

impl FromStr for RunMode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<RunMode, ModelError> {
        match s {
            "fast" => Ok(RunMode::Fast),
            "normal" => Ok(RunMode::Normal),
            "best" => Ok(RunMode::Best),
            other => Err(ModelError::Config(format!(
                "unknown run mode '{other}' (fast|normal|best)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub table_blocks: usize,
    pub graph_blocks: usize,
    pub cross_blocks: usize,
    /// Learned summary queries per (column, class) in row attention.
    pub inducing: usize,
    pub mlp_ratio: usize,
    /// Present-class count above which the hierarchical head takes over.
    pub max_flat_classes: usize,
    /// Largest number of context rows used per prediction; longer contexts are
    /// subsampled with a seeded draw.
    pub context_budget: usize,
}

impl ModelConfig {
    pub fn preset(mode: RunMode) -> ModelConfig {
        let (d, blocks, budget) = match mode {
            RunMode::Fast => (64, 2, 256),
            RunMode::Normal => (128, 3, 512),
            RunMode::Best => (128, 4, 1024),
        };
        ModelConfig {
            d,
            heads: 4,
            table_blocks: blocks,
            graph_blocks: blocks,
            cross_blocks: blocks,
            inducing: 2,
            mlp_ratio: 2,
            max_flat_classes: 16,
            context_budget: budget,
        }
    }

    /// Small configuration that pre-trains in minutes on one core.
    pub fn toy() -> ModelConfig {
        ModelConfig {
            d: 32,
            heads: 4,
            table_blocks: 1,
            graph_blocks: 2,
            cross_blocks: 1,
            inducing: 2,
            mlp_ratio: 2,
            max_flat_classes: 16,
            context_budget: 512,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.heads == 0 || self.d == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "embedding width {} must be a positive multiple of the head count {}",
                self.d, self.heads
            )));
        }
        if self.table_blocks == 0 || self.graph_blocks == 0 || self.cross_blocks == 0 {
            return Err(ModelError::Config("every stage needs at least one block".into()));
        }
        if self.inducing == 0 || self.mlp_ratio == 0 || self.context_budget == 0 {
            return Err(ModelError::Config(
                "inducing queries, MLP ratio and context budget must be positive".into(),
            ));
        }
        if self.max_flat_classes < 2 {
            return Err(ModelError::Config("the flat head needs at least two classes".into()));
        }
        Ok(())
    }
}

/// A network and its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    net: Net,
}

/// Inference settings.
#[derive(Debug, Clone)]
pub struct PredictOptions {
    /// Per-hop neighbor caps.
    pub fanouts: Vec<usize>,
    pub policy: SamplePolicy,
    pub seed: u64,
    /// Prediction rows encoded together with one copy of the context.
    pub batch: usize,
    /// Overrides the configured context budget.
    pub context_budget: Option<usize>,
    /// Probability of hiding each context feature cell.
    pub feature_drop: f64,
    /// Fraction of key links hidden from the sampler.
    pub edge_drop: f64,
    pub column_shuffle: Option<u64>,
}

impl Default for PredictOptions {
    fn default() -> PredictOptions {
        PredictOptions {
            fanouts: vec![32, 32],
            policy: SamplePolicy::MostRecent,
            seed: 0,
            batch: 128,
            context_budget: None,
            feature_drop: 0.0,
            edge_drop: 0.0,
            column_shuffle: None,
        }
    }
}

impl PredictOptions {
    pub fn with_fanouts(fanouts: &[usize]) -> PredictOptions {
        PredictOptions {
            fanouts: fanouts.to_vec(),
            ..PredictOptions::default()
        }
    }

    fn episode(&self) -> EpisodeOptions {
        EpisodeOptions {
            sample: SampleOptions {
                fanouts: self.fanouts.clone(),
                policy: self.policy,
                seed: self.seed,
                edge_drop: self.edge_drop,
            },
            feature_drop: self.feature_drop,
            seed: self.seed,
            column_shuffle: self.column_shuffle,
        }
    }
}

/// Output for one prediction row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub entity: u32,
    pub anchor_time: i64,
    /// Binary: probability of the positive class; multiclass: index of the most
    /// probable class; regression: the predicted value.
    pub prediction: f64,
    /// Distribution over the full class dictionary (classification only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<Vec<f64>>,
    /// Root entity state after the graph encoder.
    pub embedding: Vec<f64>,
}

/// Ensembling settings.
#[derive(Debug, Clone, Default)]
pub struct EnsembleOptions {
    pub num_estimators: usize,
    pub column_shuffle: bool,
    pub class_shuffle: bool,
    /// Hop depths drawn per estimator; `Some(vec![])` is an error.
    pub hop_list: Option<Vec<usize>>,
}

/// Ensemble output with the spread across estimators.
#[derive(Debug, Clone)]
pub struct EnsemblePrediction {
    pub predictions: Vec<Prediction>,
    /// Largest absolute deviation of any estimator's prediction from the average.
    pub max_estimator_deviation: f64,
}

/// Keeps at most `budget` context rows, chosen by a seeded draw and kept in order.
pub fn budget_context(context: &[TaskRow], budget: usize, seed: u64) -> Vec<TaskRow> {
    if context.len() <= budget {
        return context.to_vec();
    }
    let mut idx = rand::seq::index::sample(&mut rng_for(&[seed, 0xB0D6]), context.len(), budget).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| context[i].clone()).collect()
}

impl Model {
    /// A seeded, untrained model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let net = Net::new(&config, &mut params, seed);
        Ok(Model { config, params, net })
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Writes `manifest.json` (config plus `extra`) and the parameter file.
    pub fn save(&self, dir: &Path, extra: serde_json::Value) -> Result<(), ModelError> {
        let manifest = serde_json::json!({
            "config": self.config,
            "param_count": self.param_count(),
            "step": self.params.step(),
            "extra": extra,
        });
        self.params.save_checkpoint(dir, &manifest)?;
        Ok(())
    }

    /// Loads a model saved with [`Model::save`]; returns the manifest too.
    pub fn load(dir: &Path) -> Result<(Model, serde_json::Value), ModelError> {
        let (store, manifest) = ParamStore::load_checkpoint(dir)?;
        let config: ModelConfig = serde_json::from_value(manifest["config"].clone())
            .map_err(|e| ModelError::Config(format!("checkpoint manifest: {e}")))?;
        let mut model = Model::new(config, 0)?;
        model.params.copy_values_from(&store)?;
        Ok((model, manifest))
    }

    fn run_episode(&self, ep: &Episode, plan: &TaskPlan, rows: &[TaskRow]) -> Result<Vec<Prediction>, ModelError> {
        let mut tape = Tape::new();
        let out = self.net.forward(&mut tape, &self.params, ep)?;
        let ent = tape.value(out.entities);
        let mut preds = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            let embedding = ent.row(ep.n_ctx + i).to_vec();
            let (prediction, probabilities) = match plan.task_type {
                TaskType::Regression => {
                    let z = tape.value(out.z.expect("regression head")).data[i];
                    let y = if ep.is_degenerate() {
                        ep.center
                    } else {
                        ep.center + ep.scale * z
                    };
                    (y, None)
                }
                TaskType::Binary | TaskType::Multiclass => {
                    let logp = tape.value(out.logp.expect("classification head")).row(i);
                    let mut probs = vec![0.0; plan.n_classes()];
                    for (c, &lp) in ep.present.iter().zip(logp) {
                        probs[*c] = lp.exp();
                    }
                    let value = if plan.task_type == TaskType::Binary {
                        probs[1]
                    } else {
                        argmax(&probs) as f64
                    };
                    (value, Some(probs))
                }
            };
            preds.push(Prediction {
                entity: row.entity,
                anchor_time: row.anchor,
                prediction,
                probabilities,
                embedding,
            });
        }
        Ok(preds)
    }

    /// Predicts every row of `predict` from the labeled `context`.
    ///
    /// Prediction rows never see each other, so results do not depend on `batch`.
    pub fn predict<A: NeighborAccess + Sync + ?Sized>(
        &self,
        access: &A,
        plan: &TaskPlan,
        context: &[TaskRow],
        predict: &[TaskRow],
        opts: &PredictOptions,
    ) -> Result<Vec<Prediction>, ModelError> {
        if context.is_empty() {
            return Err(ModelError::EmptyContext);
        }
        let context = budget_context(
            context,
            opts.context_budget.unwrap_or(self.config.context_budget),
            opts.seed,
        );
        let eopts = opts.episode();
        let chunks: Vec<&[TaskRow]> = predict.chunks(opts.batch.max(1)).collect();
        let run = |chunk: &[TaskRow]| -> Result<Vec<Prediction>, ModelError> {
            let ep = build_episode(access, plan, &context, chunk, &eopts)?;
            self.run_episode(&ep, plan, chunk)
        };
        let workers = std::thread::available_parallelism()
            .map_or(1, |n| n.get())
            .min(chunks.len());
        let results: Vec<Result<Vec<Prediction>, ModelError>> = if workers <= 1 {
            chunks.iter().map(|c| run(c)).collect()
        } else {
            let mut slots: Vec<Option<Result<Vec<Prediction>, ModelError>>> = (0..chunks.len()).map(|_| None).collect();
            std::thread::scope(|s| {
                for (w, part) in slots.chunks_mut(chunks.len().div_ceil(workers)).enumerate() {
                    let base = w * chunks.len().div_ceil(workers);
                    let chunks = &chunks;
                    let run = &run;
                    s.spawn(move || {
                        for (j, slot) in part.iter_mut().enumerate() {
                            *slot = Some(run(chunks[base + j]));
                        }
                    });
                }
            });
            slots.into_iter().map(|s| s.expect("worker filled slot")).collect()
        };
        let mut out = Vec::with_capacity(predict.len());
        for r in results {
            out.extend(r?);
        }
        if predict.is_empty() {
            // Still validate the context.
            build_episode(access, plan, &context, &[], &eopts)?;
        }
        Ok(out)
    }

    /// Averages several seeded predictions with shuffled columns, shuffled class
    /// indices and/or varying hop depth.
    pub fn ensemble_predict<A: NeighborAccess + Sync + ?Sized>(
        &self,
        access: &A,
        plan: &TaskPlan,
        context: &[TaskRow],
        predict: &[TaskRow],
        opts: &PredictOptions,
        ens: &EnsembleOptions,
    ) -> Result<EnsemblePrediction, ModelError> {
        if ens.num_estimators == 0 {
            return Err(ModelError::Config("num_estimators must be at least 1".into()));
        }
        if matches!(&ens.hop_list, Some(h) if h.is_empty()) {
            return Err(ModelError::Config("hop ensembling needs a non-empty hop list".into()));
        }
        let n_classes = plan.n_classes();
        let mut runs: Vec<Vec<Prediction>> = Vec::with_capacity(ens.num_estimators);
        for e in 0..ens.num_estimators {
            let est_seed = crate::util::hash_words(&[opts.seed, 0xE5E, e as u64]);
            let mut o = opts.clone();
            if ens.column_shuffle {
                o.column_shuffle = Some(est_seed);
            }
            if let Some(hops) = &ens.hop_list {
                let depth = hops[e % hops.len()];
                let fan = opts.fanouts.first().copied().unwrap_or(32);
                o.fanouts = (0..depth)
                    .map(|h| opts.fanouts.get(h).copied().unwrap_or(fan))
                    .collect();
            }
            let perm = if ens.class_shuffle && n_classes > 1 {
                let mut p: Vec<usize> = (0..n_classes).collect();
                rand::seq::SliceRandom::shuffle(p.as_mut_slice(), &mut rng_for(&[est_seed, 0xC1A5]));
                Some(p)
            } else {
                None
            };
            let ctx: Vec<TaskRow> = match &perm {
                Some(p) => context
                    .iter()
                    .map(|r| {
                        let mut r = r.clone();
                        r.target = r.target.map(|y| p[y as usize] as f64);
                        r
                    })
                    .collect(),
                None => context.to_vec(),
            };
            let mut preds = self.predict(access, plan, &ctx, predict, &o)?;
            if let Some(p) = &perm {
                for pr in &mut preds {
                    let probs = pr.probabilities.as_mut().expect("classification");
                    let shuffled = probs.clone();
                    for (c, &pc) in p.iter().enumerate() {
                        probs[c] = shuffled[pc];
                    }
                    pr.prediction = if plan.task_type == TaskType::Binary {
                        probs[1]
                    } else {
                        argmax(probs) as f64
                    };
                }
            }
            runs.push(preds);
        }
        let k = runs.len() as f64;
        let mut avg = runs[0].clone();
        for (i, row) in avg.iter_mut().enumerate() {
            row.embedding = runs.iter().fold(vec![0.0; row.embedding.len()], |mut acc, r| {
                acc.iter_mut().zip(&r[i].embedding).for_each(|(a, x)| *a += x / k);
                acc
            });
            match &mut row.probabilities {
                Some(p) => {
                    for (c, pc) in p.iter_mut().enumerate() {
                        *pc = runs
                            .iter()
                            .map(|r| r[i].probabilities.as_ref().expect("classification")[c])
                            .sum::<f64>()
                            / k;
                    }
                    row.prediction = if plan.task_type == TaskType::Binary {
                        p[1]
                    } else {
                        argmax(p) as f64
                    };
                }
                None => row.prediction = runs.iter().map(|r| r[i].prediction).sum::<f64>() / k,
            }
        }
        let mut dev: f64 = 0.0;
        for r in &runs {
            for (a, b) in r.iter().zip(&avg) {
                match (&a.probabilities, &b.probabilities) {
                    (Some(pa), Some(pb)) => {
                        for (x, y) in pa.iter().zip(pb) {
                            dev = dev.max((x - y).abs());
                        }
                    }
                    _ => dev = dev.max((a.prediction - b.prediction).abs()),
                }
            }
        }
        Ok(EnsemblePrediction {
            predictions: avg,
            max_estimator_deviation: dev,
        })
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
