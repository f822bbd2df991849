use super::TaskgenError;
use crate::colstore::{EdgeType, NeighborAccess};
use crate::pql::{parse_bool, AggFn, LabelSpec, TaskPlan};
use crate::relgraph::NodeId;

/// How label-event reads are reported to the access layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Audit {
    /// Target label: events belong to the future of the anchor.
    Label,
    /// Lagged label used as an input feature: events belong to the past.
    Input,
}

/// Label of `entity` (a row of the plan's entity table) at `anchor`.
///
/// Temporal plans aggregate the linked rows with timestamp in
/// `(anchor + start, anchor + end]`; COUNT and SUM of an empty set are 0, AVG/MIN/MAX
/// of an empty set are `None`. A comparison turns the aggregate into 0/1. Static plans
/// read the stored cell: the value (regression), 0/1 (boolean), or the class index.
pub fn compute_label<A: NeighborAccess + ?Sized>(
    access: &A,
    plan: &TaskPlan,
    entity: u32,
    anchor: i64,
) -> Result<Option<f64>, TaskgenError> {
    label_audited(access, plan, entity, anchor, Audit::Label)
}

pub(crate) fn label_audited<A: NeighborAccess + ?Sized>(
    access: &A,
    plan: &TaskPlan,
    entity: u32,
    anchor: i64,
    audit: Audit,
) -> Result<Option<f64>, TaskgenError> {
    let graph = access.graph();
    let et = plan.entity.table_index;
    if entity as usize >= graph.table(et).row_count() {
        return Err(TaskgenError::EntityNotFound(entity));
    }
    match &plan.label {
        LabelSpec::Provided => Err(TaskgenError::NoLabelRule),
        LabelSpec::Static {
            column_index, boolean, ..
        } => {
            let col = &graph.table(et).columns()[*column_index];
            let r = entity as usize;
            Ok(if *boolean {
                col.str_at(r).and_then(parse_bool).map(|b| b as u8 as f64)
            } else if plan.classes.is_empty() {
                col.f64_at(r)
            } else {
                col.str_at(r).map(|s| plan.class_index(s) as f64)
            })
        }
        LabelSpec::Aggregate {
            func,
            table_index,
            column_index,
            link,
            window_start_ms,
            window_end_ms,
            filter,
            comparison,
            ..
        } => {
            let lo = anchor.saturating_add(*window_start_ms);
            let hi = anchor.saturating_add(*window_end_ms);
            let agg_table = graph.table(*table_index);
            let rev = EdgeType::new(*link, true);
            let mut count = 0usize;
            let mut sum = 0.0;
            let mut min = f64::INFINITY;
            let mut max = f64::NEG_INFINITY;
            let mut n_values = 0usize;
            for (node, t) in access
                .index()
                .neighbors_in_window(NodeId::new(et, entity as usize), rev, lo, hi)?
            {
                let r = node.row as usize;
                if !filter.iter().all(|p| p.eval(&agg_table.columns()[p.column_index], r)) {
                    continue;
                }
                match audit {
                    Audit::Label => access.note_label(t),
                    Audit::Input => access.note_input(node),
                }
                count += 1;
                if let Some(ci) = column_index {
                    if let Some(v) = agg_table.columns()[*ci].f64_at(r) {
                        sum += v;
                        min = min.min(v);
                        max = max.max(v);
                        n_values += 1;
                    }
                }
            }
            let value = match func {
                AggFn::Count => Some(count as f64),
                AggFn::Sum => Some(sum),
                AggFn::Avg => (n_values > 0).then(|| sum / n_values as f64),
                AggFn::Min => (n_values > 0).then_some(min),
                AggFn::Max => (n_values > 0).then_some(max),
            };
            Ok(match comparison {
                Some((op, lit)) => value.map(|v| op.apply(v, *lit) as u8 as f64),
                None => value,
            })
        }
    }
}
