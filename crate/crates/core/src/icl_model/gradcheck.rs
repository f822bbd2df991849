use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tokens::build_episode;
use super::train::episode_loss;
use super::{Model, ModelError, PredictOptions};
use crate::autodiff::Tape;
use crate::colstore::NeighborAccess;
use crate::pql::TaskPlan;
use crate::taskgen::TaskRow;
use crate::util::rng_for;

/// Central-difference step used by [`gradient_check`].
pub const FD_STEP: f64 = 1e-5;

/// Worst relative error among the checked coordinates of one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub prefix: String,
    pub checked: usize,
    pub nonzero: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.groups.iter().map(|g| g.checked).sum()
    }
}

/// Compares the backward pass of the prediction loss against central finite
/// differences on `per_tensor` random coordinates of every parameter tensor whose
/// name starts with one of `prefixes`.
///
/// The relative error is `|fd - an| / max(|fd|, |an|, 1e-4)`.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check<A: NeighborAccess + ?Sized>(
    model: &Model,
    access: &A,
    plan: &TaskPlan,
    context: &[TaskRow],
    predict: &[TaskRow],
    opts: &PredictOptions,
    prefixes: &[&str],
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport, ModelError> {
    let ep = build_episode(access, plan, context, predict, &opts.episode())?;
    let loss_of = |m: &Model| -> Result<f64, ModelError> {
        let mut t = Tape::new();
        let l = episode_loss(m, &mut t, &ep, predict)?.ok_or(ModelError::UnlabeledContext)?;
        Ok(t.value(l).item())
    };
    let mut tape = Tape::new();
    let l = episode_loss(model, &mut tape, &ep, predict)?.ok_or(ModelError::UnlabeledContext)?;
    let grads = tape.backward(l)?.for_params(&model.params);
    let mut rng = rng_for(&[seed, 0x6C4E]);
    let mut groups: Vec<GroupError> = prefixes
        .iter()
        .map(|p| GroupError {
            prefix: p.to_string(),
            checked: 0,
            nonzero: 0,
            max_rel_error: 0.0,
        })
        .collect();
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let name = model.params.name(id);
        let Some(g) = prefixes.iter().position(|p| name.starts_with(p)) else {
            continue;
        };
        let n = model.params.tensor(id).len();
        for _ in 0..per_tensor.min(n) {
            let j = rng.gen_range(0..n);
            let mut plus = model.clone();
            plus.params.tensor_mut(id).data[j] += FD_STEP;
            let mut minus = model.clone();
            minus.params.tensor_mut(id).data[j] -= FD_STEP;
            let fd = (loss_of(&plus)? - loss_of(&minus)?) / (2.0 * FD_STEP);
            let an = grads[id.0].data[j];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
            let group = &mut groups[g];
            group.checked += 1;
            group.nonzero += usize::from(an.abs() > 1e-9);
            group.max_rel_error = group.max_rel_error.max(rel);
        }
    }
    Ok(GradCheckReport { groups })
}
