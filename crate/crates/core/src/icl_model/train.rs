//! Pre-training on synthetic relational tasks and per-task fine-tuning.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tokens::{build_episode, Episode, EpisodeOptions};
use super::{budget_context, Model, ModelError};
use crate::autodiff::{clip_grad_norm, AdamConfig, Tape, Var};
use crate::colstore::{NeighborAccess, Store};
use crate::pql::{TaskPlan, TaskType};
use crate::sampler::SampleOptions;
use crate::scm::{make_interaction, sample_database, sample_task, InteractionConfig, ScmConfig};
use crate::taskgen::TaskRow;
use crate::util::{hash_words, rng_for};

/// Loss of one episode: mean NLL over prediction rows whose class occurs in the
/// context, or mean Huber loss on normalized regression targets. `None` when no
/// prediction row carries a usable target.
pub(crate) fn episode_loss(
    model: &Model,
    tape: &mut Tape,
    ep: &Episode,
    pred: &[TaskRow],
) -> Result<Option<Var>, ModelError> {
    let out = model.net.forward(tape, &model.params, ep)?;
    if ep.is_classification() {
        let logp = out.logp.expect("classification head");
        let c = ep.present.len();
        let idx: Vec<usize> = pred
            .iter()
            .enumerate()
            .filter_map(|(i, r)| {
                let y = r.target? as usize;
                ep.present.binary_search(&y).ok().map(|k| i * c + k)
            })
            .collect();
        if idx.is_empty() {
            return Ok(None);
        }
        let picked = tape.select(logp, &idx)?;
        let m = tape.mean(picked);
        Ok(Some(tape.scale(m, -1.0)))
    } else {
        if ep.is_degenerate() {
            return Ok(None);
        }
        let z = out.z.expect("regression head");
        let rows: Vec<usize> = (0..pred.len())
            .filter(|&i| pred[i].target.is_some_and(f64::is_finite))
            .collect();
        if rows.is_empty() {
            return Ok(None);
        }
        let target: Vec<f64> = rows
            .iter()
            .map(|&i| ((pred[i].target.expect("filtered") - ep.center) / ep.scale).clamp(-20.0, 20.0))
            .collect();
        let zs = tape.select(z, &rows)?;
        let h = tape.huber(zs, &target, 1.0)?;
        Ok(Some(tape.mean(h)))
    }
}

/// A training task: a store, its plan and labeled rows.
pub(crate) struct TrainTask {
    pub store: Store,
    pub plan: TaskPlan,
    pub rows: Vec<TaskRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// Total optimizer steps, counted across resumptions.
    pub steps: u64,
    pub seed: u64,
    /// Share of steps spent on single-table tasks before multi-table ones.
    pub stage1_fraction: f64,
    pub lr: f64,
    pub warmup: u64,
    pub clip: f64,
    /// Inclusive range of context rows per episode.
    pub context: (usize, usize),
    pub predict: usize,
    pub fanouts: Vec<usize>,
    pub scm: ScmConfig,
    /// Chance that a multi-table step draws a row-interaction task.
    pub interaction_prob: f64,
    /// Episodes in the fixed evaluation suite.
    pub eval_episodes: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: u64,
}

impl Default for PretrainConfig {
    fn default() -> PretrainConfig {
        PretrainConfig {
            steps: 2000,
            seed: 0,
            stage1_fraction: 0.25,
            lr: 2e-3,
            warmup: 50,
            clip: 1.0,
            context: (16, 40),
            predict: 8,
            fanouts: vec![6, 3],
            scm: ScmConfig {
                n_entities: 64,
                rows_per_entity: 4.0,
                ..ScmConfig::default()
            },
            interaction_prob: 0.3,
            eval_episodes: 16,
            checkpoint_dir: None,
            checkpoint_every: 500,
        }
    }
}

impl PretrainConfig {
    /// Hex SHA-256 of the JSON form, recorded in checkpoint manifests. Where and how
    /// often checkpoints are written does not change training, so it is left out.
    pub fn hash(&self) -> String {
        let recipe = PretrainConfig {
            checkpoint_dir: None,
            checkpoint_every: 0,
            ..self.clone()
        };
        let json = serde_json::to_vec(&recipe).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn stage1_steps(&self) -> u64 {
        (self.steps as f64 * self.stage1_fraction).round() as u64
    }

    fn lr_at(&self, step: u64) -> f64 {
        let warm = if self.warmup > 0 {
            ((step + 1) as f64 / self.warmup as f64).min(1.0)
        } else {
            1.0
        };
        let progress = step as f64 / self.steps.max(1) as f64;
        let cosine = 0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * warm * cosine
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Training loss per step run in this call (`NaN` for skipped steps).
    pub losses: Vec<f64>,
    pub first_step: u64,
    pub eval_before: f64,
    pub eval_after: f64,
    pub seconds: f64,
}

/// Draws the synthetic task of one step: single-table SCM tasks in stage 1,
/// multi-table SCM or row-interaction tasks in stage 2.
pub(crate) fn draw_task(cfg: &PretrainConfig, stage2: bool, seed: u64) -> Result<TrainTask, ModelError> {
    let mut rng = rng_for(&[seed, 0x7A11]);
    if stage2 && rng.gen::<f64>() < cfg.interaction_prob {
        let lo = rng.gen_range(2..=3);
        let icfg = InteractionConfig {
            n_entities: cfg.scm.n_entities,
            rows_per_entity: (lo, lo + rng.gen_range(0..=3)),
            distractors: rng.gen_range(0..=2),
            horizon_days: cfg.scm.horizon_days,
        };
        let task = make_interaction(&icfg, seed)?;
        return Ok(TrainTask {
            store: Store::build(task.graph),
            plan: task.plan,
            rows: task.rows,
        });
    }
    let scm = if stage2 {
        cfg.scm.clone()
    } else {
        cfg.scm.single_table()
    };
    let db = sample_database(&scm, seed)?;
    let task = sample_task(&db, &scm, seed)?;
    Ok(TrainTask {
        store: Store::build(task.graph),
        plan: task.plan,
        rows: task.rows,
    })
}

/// Splits `rows` into a context and prediction set of the configured sizes.
fn split_rows(rows: &[TaskRow], context: (usize, usize), predict: usize, seed: u64) -> (Vec<TaskRow>, Vec<TaskRow>) {
    let mut rng = rng_for(&[seed, 0x5E17]);
    let mut idx: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].target.is_some()).collect();
    idx.shuffle(&mut rng);
    let n_pred = predict.min(idx.len() / 2);
    let n_ctx = rng.gen_range(context.0..=context.1).min(idx.len() - n_pred);
    let pred = idx[..n_pred].iter().map(|&i| rows[i].clone()).collect();
    let ctx = idx[n_pred..n_pred + n_ctx].iter().map(|&i| rows[i].clone()).collect();
    (ctx, pred)
}

fn episode_options(fanouts: &[usize], seed: u64) -> EpisodeOptions {
    let mut sample = SampleOptions::new(fanouts);
    sample.seed = seed;
    EpisodeOptions {
        sample,
        feature_drop: 0.0,
        seed,
        column_shuffle: None,
    }
}

/// Loss and gradients of one training episode, `None` if it has no usable target.
#[allow(clippy::too_many_arguments)]
fn task_step<A: NeighborAccess + ?Sized>(
    model: &Model,
    access: &A,
    plan: &TaskPlan,
    rows: &[TaskRow],
    context: (usize, usize),
    predict: usize,
    fanouts: &[usize],
    seed: u64,
    want_grads: bool,
) -> Result<Option<(f64, Vec<crate::autodiff::Tensor>)>, ModelError> {
    let (ctx, pred) = split_rows(rows, context, predict, seed);
    if ctx.is_empty() || pred.is_empty() {
        return Ok(None);
    }
    let ep = build_episode(access, plan, &ctx, &pred, &episode_options(fanouts, seed))?;
    let mut tape = Tape::new();
    let Some(loss) = episode_loss(model, &mut tape, &ep, &pred)? else {
        return Ok(None);
    };
    let value = tape.value(loss).item();
    if !want_grads || !value.is_finite() {
        return Ok(Some((value, Vec::new())));
    }
    let grads = tape.backward(loss)?.for_params(&model.params);
    Ok(Some((value, grads)))
}

/// Mean loss over a fixed suite of stage-2 episodes.
pub fn eval_suite_loss(model: &Model, cfg: &PretrainConfig) -> Result<f64, ModelError> {
    let mut total = 0.0;
    let mut n = 0usize;
    for e in 0..cfg.eval_episodes as u64 {
        let seed = hash_words(&[cfg.seed, 0xE7A1, e]);
        let task = draw_task(cfg, e % 4 != 0, seed)?;
        if let Some((l, _)) = task_step(
            model,
            &task.store,
            &task.plan,
            &task.rows,
            cfg.context,
            cfg.predict,
            &cfg.fanouts,
            seed,
            false,
        )? {
            total += l;
            n += 1;
        }
    }
    Ok(if n == 0 { f64::NAN } else { total / n as f64 })
}

/// Trains `model` from its current step up to `cfg.steps`.
///
/// Every step's task and split derive from `(cfg.seed, step)`, and optimizer state
/// travels with the parameters, so a run resumed from a checkpoint reproduces the
/// uninterrupted one exactly.
pub fn pretrain(model: &mut Model, cfg: &PretrainConfig) -> Result<PretrainReport, ModelError> {
    pretrain_until(model, cfg, cfg.steps)
}

/// Like [`pretrain`] but stops after step `stop` of the `cfg.steps` schedule.
pub fn pretrain_until(model: &mut Model, cfg: &PretrainConfig, stop: u64) -> Result<PretrainReport, ModelError> {
    let start = std::time::Instant::now();
    let first_step = model.params.step();
    let eval_before = eval_suite_loss(model, cfg)?;
    let mut losses = Vec::new();
    for step in first_step..stop.min(cfg.steps) {
        let seed = hash_words(&[cfg.seed, 0x9E7, step]);
        let stage2 = step >= cfg.stage1_steps();
        let task = draw_task(cfg, stage2, seed)?;
        let adam = AdamConfig {
            lr: cfg.lr_at(step),
            ..AdamConfig::default()
        };
        match task_step(
            model,
            &task.store,
            &task.plan,
            &task.rows,
            cfg.context,
            cfg.predict,
            &cfg.fanouts,
            seed,
            true,
        )? {
            Some((loss, mut grads)) => {
                if !loss.is_finite() {
                    return Err(ModelError::Diverged { step, loss });
                }
                let norm = clip_grad_norm(&mut grads, cfg.clip);
                if !norm.is_finite() {
                    return Err(ModelError::Diverged { step, loss: norm });
                }
                model.params.adam_step(&grads, &adam);
                losses.push(loss);
            }
            None => {
                // Keep the step counter aligned with the schedule.
                let zeros: Vec<_> = model
                    .params
                    .tensors()
                    .iter()
                    .map(|t| crate::autodiff::Tensor::zeros(&t.shape))
                    .collect();
                model.params.adam_step(&zeros, &AdamConfig { lr: 0.0, ..adam });
                losses.push(f64::NAN);
            }
        }
        let done = step + 1;
        if let Some(dir) = &cfg.checkpoint_dir {
            if done % cfg.checkpoint_every.max(1) == 0 || done == stop.min(cfg.steps) {
                model.save(
                    dir,
                    serde_json::json!({
                        "seed": cfg.seed,
                        "step": done,
                        "stage": if done > cfg.stage1_steps() { 2 } else { 1 },
                        "pretrain_config_hash": cfg.hash(),
                    }),
                )?;
            }
        }
    }
    let eval_after = eval_suite_loss(model, cfg)?;
    Ok(PretrainReport {
        losses,
        first_step,
        eval_before,
        eval_after,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub steps: u64,
    pub seed: u64,
    pub lr: f64,
    pub clip: f64,
    pub context: (usize, usize),
    pub predict: usize,
    pub fanouts: Vec<usize>,
    /// Share of rows held out to decide whether an update beats the base.
    pub validation_fraction: f64,
    pub eval_every: u64,
}

impl Default for FineTuneConfig {
    fn default() -> FineTuneConfig {
        FineTuneConfig {
            steps: 100,
            seed: 0,
            lr: 5e-4,
            clip: 1.0,
            context: (32, 64),
            predict: 16,
            fanouts: vec![6, 3],
            validation_fraction: 0.25,
            eval_every: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FineTuneReport {
    pub base_validation: f64,
    pub best_validation: f64,
    /// Step whose parameters were kept; 0 means the base model.
    pub best_step: u64,
    pub seconds: f64,
}

/// Validation loss: held-out rows predicted from the training rows as context.
fn validation_loss<A: NeighborAccess + ?Sized>(
    model: &Model,
    access: &A,
    plan: &TaskPlan,
    train: &[TaskRow],
    valid: &[TaskRow],
    cfg: &FineTuneConfig,
) -> Result<f64, ModelError> {
    let ctx = budget_context(train, cfg.context.1.max(1), cfg.seed);
    let opts = episode_options(&cfg.fanouts, cfg.seed);
    let mut total = 0.0;
    let mut n = 0.0;
    for chunk in valid.chunks(64) {
        let ep = build_episode(access, plan, &ctx, chunk, &opts)?;
        let mut tape = Tape::new();
        if let Some(l) = episode_loss(model, &mut tape, &ep, chunk)? {
            total += tape.value(l).item() * chunk.len() as f64;
            n += chunk.len() as f64;
        }
    }
    Ok(if n == 0.0 { f64::INFINITY } else { total / n })
}

/// Continues training on one task's labeled rows and returns the parameters that
/// scored best on a held-out part of them, the base model included.
pub fn fine_tune<A: NeighborAccess + ?Sized>(
    base: &Model,
    store: &A,
    plan: &TaskPlan,
    rows: &[TaskRow],
    cfg: &FineTuneConfig,
) -> Result<(Model, FineTuneReport), ModelError> {
    let start = std::time::Instant::now();
    let labeled: Vec<TaskRow> = rows.iter().filter(|r| r.target.is_some()).cloned().collect();
    if labeled.len() < 4 {
        return Err(ModelError::EmptyContext);
    }
    if plan.task_type != TaskType::Regression {
        for r in &labeled {
            let y = r.target.expect("labeled");
            if y < 0.0 || y as usize >= plan.n_classes() {
                return Err(ModelError::ClassMismatch(format!(
                    "label {y} outside the plan's classes"
                )));
            }
        }
    }
    let mut idx: Vec<usize> = (0..labeled.len()).collect();
    idx.shuffle(&mut rng_for(&[cfg.seed, 0xF17E]));
    let n_valid = ((labeled.len() as f64 * cfg.validation_fraction).round() as usize).clamp(1, labeled.len() - 2);
    let valid: Vec<TaskRow> = idx[..n_valid].iter().map(|&i| labeled[i].clone()).collect();
    let train: Vec<TaskRow> = idx[n_valid..].iter().map(|&i| labeled[i].clone()).collect();

    let mut model = base.clone();
    let base_validation = validation_loss(&model, store, plan, &train, &valid, cfg)?;
    let mut best = (base_validation, 0, model.params.clone());
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    for step in 0..cfg.steps {
        let seed = hash_words(&[cfg.seed, 0xF1, step]);
        if let Some((loss, mut grads)) = task_step(
            &model,
            store,
            plan,
            &train,
            cfg.context,
            cfg.predict,
            &cfg.fanouts,
            seed,
            true,
        )? {
            if !loss.is_finite() {
                return Err(ModelError::Diverged { step, loss });
            }
            clip_grad_norm(&mut grads, cfg.clip);
            model.params.adam_step(&grads, &adam);
        }
        let done = step + 1;
        if done % cfg.eval_every.max(1) == 0 || done == cfg.steps {
            let v = validation_loss(&model, store, plan, &train, &valid, cfg)?;
            if v < best.0 {
                best = (v, done, model.params.clone());
            }
        }
    }
    model.params = best.2;
    Ok((
        model,
        FineTuneReport {
            base_validation,
            best_validation: best.0,
            best_step: best.1,
            seconds: start.elapsed().as_secs_f64(),
        },
    ))
}
