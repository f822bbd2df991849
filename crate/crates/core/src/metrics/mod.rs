//! Evaluation metrics and the robustness sweep harness.

mod ablation;
mod bench;


use thiserror::Error;

use crate::baseline::BaselineError;
use crate::icl_model::ModelError;
use crate::scm::ScmError;
use crate::taskgen::TaskgenError;

pub use ablation::{run_ablation, AblationPoint, AblationReport, AblationSpec, EvalReport, Sweep, TaskSource};
pub use bench::{conjunction_benchmark, ConjunctionConfig, ConjunctionResult};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("{0} predictions but {1} targets")]
    Length(usize, usize),
    #[error("AUROC needs both classes among the labels")]
    SingleClass,
    #[error("labels must be 0 or 1, found {0}")]
    Label(f64),
    #[error("true class {class} missing from ranking {index}")]
    MissingClass { index: usize, class: usize },
    #[error("baseline value of task {0} is zero")]
    ZeroBaseline(usize),
    #[error("invalid ablation: {0}")]
    Config(String),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scm(#[from] ScmError),
    #[error(transparent)]
    Taskgen(#[from] TaskgenError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Area under the ROC curve from the rank-sum formula: the fraction of
/// (positive, negative) pairs ranked correctly, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[f64]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::Length(scores.len(), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(MetricsError::Label(bad));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives, with tied blocks sharing their mean rank.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let twice_mean = (i + 1 + j + 1) as u128;
        let pos = idx[i..=j].iter().filter(|&&k| labels[k] == 1.0).count() as u128;
        twice_rank_sum += twice_mean * pos;
        i = j + 1;
    }
    let n_pos = n_pos as u128;
    let twice_wins = twice_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_wins as f64 / 2.0 / (n_pos * n_neg as u128) as f64)
}

pub fn mae(predictions: &[f64], targets: &[f64]) -> Result<f64, MetricsError> {
    if predictions.len() != targets.len() {
        return Err(MetricsError::Length(predictions.len(), targets.len()));
    }
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(predictions.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / predictions.len() as f64)
}

/// Mean reciprocal rank of each true class within its ranked class list.
pub fn mrr(rankings: &[Vec<usize>], truth: &[usize]) -> Result<f64, MetricsError> {
    if rankings.len() != truth.len() {
        return Err(MetricsError::Length(rankings.len(), truth.len()));
    }
    if rankings.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut total = 0.0;
    for (i, (r, &t)) in rankings.iter().zip(truth).enumerate() {
        let pos = r
            .iter()
            .position(|&c| c == t)
            .ok_or(MetricsError::MissingClass { index: i, class: t })?;
        total += 1.0 / (pos + 1) as f64;
    }
    Ok(total / rankings.len() as f64)
}

/// Classes ordered by descending score, ties by ascending index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Mean over tasks of `value / baseline`.
pub fn normalized_average(values: &[f64], baselines: &[f64]) -> Result<f64, MetricsError> {
    if values.len() != baselines.len() {
        return Err(MetricsError::Length(values.len(), baselines.len()));
    }
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(i) = baselines.iter().position(|&b| b == 0.0) {
        return Err(MetricsError::ZeroBaseline(i));
    }
    Ok(values.iter().zip(baselines).map(|(v, b)| v / b).sum::<f64>() / values.len() as f64)
}
