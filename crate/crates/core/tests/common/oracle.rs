//! Brute-force references for store lookups, labels and metrics, with generators of
//! small random instances.

use std::cmp::Ordering;

use proptest::prelude::*;
use relicl::colstore::{snapshot, EdgeType};
use relicl::metrics::{auroc, mrr, ranking};
use relicl::pql::{compile, parse};
use relicl::relgraph::NodeId;
use relicl::taskgen::compute_label;
use relicl::time::{MS_PER_DAY, MS_PER_HOUR};

use super::{shop, Order};

const USERS: usize = 0;
const ORDERS: usize = 1;

pub type Database = (Vec<i64>, Vec<Order>);

fn order() -> impl Strategy<Value = Order> {
    (
        prop::option::weighted(0.9, 0usize..7),
        0i64..20,
        prop::option::weighted(0.85, -50.0f64..50.0),
    )
        .prop_map(|(user, day, price)| Order { user, day, price })
}

/// Up to six users (keys past the last user dangle) with up to forty orders.
pub fn database() -> impl Strategy<Value = Database> {
    (
        prop::collection::vec(0i64..12, 1..7),
        prop::collection::vec(order(), 0..40),
    )
}

/// Orders of `user` with day `<= t`, most recent first, ties by ascending row.
fn brute_orders_before(orders: &[Order], n_users: usize, user: usize, t: i64) -> Vec<u32> {
    let mut hits: Vec<(i64, u32)> = orders
        .iter()
        .enumerate()
        .filter(|(_, o)| o.user == Some(user) && user < n_users && o.day * MS_PER_DAY <= t)
        .map(|(r, o)| (o.day * MS_PER_DAY, r as u32))
        .collect();
    hits.sort_by_key(|&(time, row)| (std::cmp::Reverse(time), row));
    hits.into_iter().map(|(_, r)| r).collect()
}

pub fn neighbors_case() -> impl Strategy<Value = (Database, i64, usize)> {
    (database(), -2i64..24, 0i64..24, 1usize..8).prop_map(|(db, d, h, k)| (db, d * MS_PER_DAY + h * MS_PER_HOUR, k))
}

pub fn check_neighbors_before((db, t, k): (Database, i64, usize)) -> Result<(), TestCaseError> {
    let (joined, orders) = db;
    let store = shop(&joined, &orders);
    let rev = EdgeType::new(0, true);
    let fwd = EdgeType::new(0, false);
    for u in 0..joined.len() {
        let got: Vec<NodeId> = store.index.neighbors_before(NodeId::new(USERS, u), rev, t, k).unwrap();
        let want: Vec<NodeId> = brute_orders_before(&orders, joined.len(), u, t)
            .into_iter()
            .take(k)
            .map(|r| NodeId::new(ORDERS, r as usize))
            .collect();
        prop_assert_eq!(got, want);
    }
    for (r, o) in orders.iter().enumerate() {
        let got = store.index.neighbors_before(NodeId::new(ORDERS, r), fwd, t, k).unwrap();
        let want: Vec<NodeId> = match o.user {
            Some(u) if u < joined.len() && joined[u] * MS_PER_DAY <= t => vec![NodeId::new(USERS, u)],
            _ => vec![],
        };
        prop_assert_eq!(got, want);
    }
    Ok(())
}

pub fn snapshot_case() -> impl Strategy<Value = (Database, i64, usize)> {
    (database(), -2i64..24, 1usize..6).prop_map(|(db, d, k)| (db, d * MS_PER_DAY, k))
}

pub fn check_snapshot((db, t, k): (Database, i64, usize)) -> Result<(), TestCaseError> {
    let (joined, orders) = db;
    let store = shop(&joined, &orders);
    let view = snapshot(&store.graph, t);
    let users: Vec<u32> = (0..joined.len() as u32)
        .filter(|&u| joined[u as usize] * MS_PER_DAY <= t)
        .collect();
    let visible_orders: Vec<u32> = (0..orders.len() as u32)
        .filter(|&r| orders[r as usize].day * MS_PER_DAY <= t)
        .collect();
    prop_assert_eq!(view.visible_rows(USERS), users.clone());
    prop_assert_eq!(view.visible_rows(ORDERS), visible_orders.clone());
    prop_assert_eq!(view.node_count(), users.len() + visible_orders.len());
    prop_assert_eq!(view.nodes().count(), view.node_count());
    let rev = EdgeType::new(0, true);
    for u in 0..joined.len() {
        let node = NodeId::new(USERS, u);
        prop_assert_eq!(view.contains(node), users.contains(&(u as u32)));
        let got: Vec<u32> = view
            .neighbors(&store.index, node, rev, k)
            .unwrap()
            .into_iter()
            .map(|n| n.row)
            .collect();
        let want: Vec<u32> = if view.contains(node) {
            brute_orders_before(&orders, joined.len(), u, t)
                .into_iter()
                .take(k)
                .collect()
        } else {
            vec![]
        };
        prop_assert_eq!(got, want);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Func {
    Count,
    Sum,
    Avg,
    Min,
    Max,
}

#[derive(Debug, Clone)]
pub struct LabelQuery {
    func: Func,
    start: i64,
    len: i64,
    hours: bool,
    filter: Option<(&'static str, i64)>,
    comparison: Option<(&'static str, i64)>,
}

impl LabelQuery {
    pub fn text(&self) -> String {
        let (name, col) = match self.func {
            Func::Count => ("COUNT", "*"),
            Func::Sum => ("SUM", "price"),
            Func::Avg => ("AVG", "price"),
            Func::Min => ("MIN", "price"),
            Func::Max => ("MAX", "price"),
        };
        let unit = if self.hours { "hours" } else { "days" };
        let mut q = format!(
            "PREDICT {name}(orders.{col}, {}, {}, {unit}",
            self.start,
            self.start + self.len
        );
        if let Some((op, v)) = self.filter {
            q.push_str(&format!(", WHERE price {op} {v}"));
        }
        q.push(')');
        if let Some((op, v)) = self.comparison {
            q.push_str(&format!(" {op} {v}"));
        }
        q.push_str(" FOR EACH users.user_id");
        q
    }

    fn unit_ms(&self) -> i64 {
        if self.hours {
            MS_PER_HOUR
        } else {
            MS_PER_DAY
        }
    }
}

fn cmp(op: &str, a: f64, b: f64) -> bool {
    match op {
        "=" => a == b,
        "!=" => a != b,
        "<" => a < b,
        "<=" => a <= b,
        ">" => a > b,
        ">=" => a >= b,
        _ => unreachable!(),
    }
}

const OPS: [&str; 6] = ["=", "!=", "<", "<=", ">", ">="];

fn label_query() -> impl Strategy<Value = LabelQuery> {
    (
        prop::sample::select(vec![Func::Count, Func::Sum, Func::Avg, Func::Min, Func::Max]),
        -6i64..3,
        1i64..12,
        prop::bool::weighted(0.2),
        prop::option::of((prop::sample::select(OPS.to_vec()), -20i64..20)),
        prop::option::of((prop::sample::select(OPS.to_vec()), -3i64..4)),
    )
        .prop_map(|(func, start, len, hours, filter, comparison)| LabelQuery {
            func,
            start,
            len,
            hours: hours && func == Func::Count,
            filter,
            comparison,
        })
}

/// Direct evaluation of the label definition from the raw rows.
fn brute_label(q: &LabelQuery, orders: &[Order], n_users: usize, user: usize, anchor: i64) -> Option<f64> {
    let lo = anchor + q.start * q.unit_ms();
    let hi = anchor + (q.start + q.len) * q.unit_ms();
    let rows: Vec<&Order> = orders
        .iter()
        .filter(|o| o.user == Some(user) && user < n_users)
        .filter(|o| lo < o.day * MS_PER_DAY && o.day * MS_PER_DAY <= hi)
        .filter(|o| match q.filter {
            Some((op, v)) => o.price.is_some_and(|p| cmp(op, p, v as f64)),
            None => true,
        })
        .collect();
    let values: Vec<f64> = rows.iter().filter_map(|o| o.price).collect();
    let value = match q.func {
        Func::Count => Some(rows.len() as f64),
        Func::Sum => Some(values.iter().sum()),
        Func::Avg => (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64),
        Func::Min => values.iter().copied().reduce(f64::min),
        Func::Max => values.iter().copied().reduce(f64::max),
    };
    match q.comparison {
        Some((op, c)) => value.map(|v| cmp(op, v, c as f64) as u8 as f64),
        None => value,
    }
}

pub fn label_case() -> impl Strategy<Value = (Database, LabelQuery, Vec<i64>)> {
    (
        database(),
        label_query(),
        prop::collection::vec((-3i64..22, 0i64..24), 1..5),
    )
        .prop_map(|(db, q, anchors)| {
            let anchors = anchors
                .into_iter()
                .map(|(d, h)| d * MS_PER_DAY + h * MS_PER_HOUR)
                .collect();
            (db, q, anchors)
        })
}

/// Exact for counts, extrema and comparisons; sums and means within 1e-12 relative.
pub fn check_compute_label((db, q, anchors): (Database, LabelQuery, Vec<i64>)) -> Result<(), TestCaseError> {
    let (joined, orders) = db;
    let store = shop(&joined, &orders);
    let plan = compile(&parse(&q.text()).unwrap(), &store.graph).unwrap();
    let exact = matches!(q.func, Func::Count | Func::Min | Func::Max) || q.comparison.is_some();
    for anchor in anchors {
        for u in 0..joined.len() {
            let got = compute_label(&store, &plan, u as u32, anchor).unwrap();
            let want = brute_label(&q, &orders, joined.len(), u, anchor);
            match (got, want) {
                (Some(a), Some(b)) if !exact => {
                    prop_assert!(
                        (a - b).abs() <= 1e-12 * b.abs().max(1.0),
                        "{}: {} vs {}",
                        q.text(),
                        a,
                        b
                    )
                }
                (a, b) => prop_assert_eq!(a, b, "{}", q.text()),
            }
        }
    }
    Ok(())
}

/// Scores on a coarse grid so ties are common.
pub fn auroc_case() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0u8..6, prop::bool::ANY), 2..60)
        .prop_map(|v| v.into_iter().map(|(s, y)| (s as f64 / 2.0, y as u8 as f64)).collect())
}

/// Pairs won by positives over negatives, ties counting half, as twice-wins over
/// twice-pairs.
fn brute_auroc(scores: &[f64], labels: &[f64]) -> (u64, u64) {
    let mut twice_wins = 0u64;
    let mut pairs = 0u64;
    for (i, &yi) in labels.iter().enumerate() {
        for (j, &yj) in labels.iter().enumerate() {
            if yi == 1.0 && yj == 0.0 {
                pairs += 1;
                twice_wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    Ordering::Greater => 2,
                    Ordering::Equal => 1,
                    Ordering::Less => 0,
                };
            }
        }
    }
    (twice_wins, 2 * pairs)
}

pub fn check_auroc(data: Vec<(f64, f64)>) -> Result<(), TestCaseError> {
    let scores: Vec<f64> = data.iter().map(|p| p.0).collect();
    let labels: Vec<f64> = data.iter().map(|p| p.1).collect();
    if !(labels.contains(&0.0) && labels.contains(&1.0)) {
        prop_assert!(auroc(&scores, &labels).is_err());
        return Ok(());
    }
    let (num, den) = brute_auroc(&scores, &labels);
    prop_assert_eq!(auroc(&scores, &labels).unwrap(), num as f64 / den as f64);
    Ok(())
}

pub fn mrr_case() -> impl Strategy<Value = Vec<(Vec<f64>, usize)>> {
    prop::collection::vec(
        (prop::collection::vec(0u8..5, 1..8), any::<prop::sample::Index>()),
        1..30,
    )
    .prop_map(|rows| {
        rows.into_iter()
            .map(|(s, i)| (s.iter().map(|&v| v as f64).collect::<Vec<f64>>(), i.index(s.len())))
            .collect()
    })
}

/// Reciprocal rank of the true item when sorting by descending score, ties by index.
fn brute_mrr(rows: &[(Vec<f64>, usize)]) -> f64 {
    let total: f64 = rows
        .iter()
        .map(|(s, t)| {
            let better = s
                .iter()
                .enumerate()
                .filter(|&(i, &v)| v > s[*t] || (v == s[*t] && i < *t))
                .count();
            1.0 / (better + 1) as f64
        })
        .sum();
    total / rows.len() as f64
}

pub fn check_mrr(rows: Vec<(Vec<f64>, usize)>) -> Result<(), TestCaseError> {
    let rankings: Vec<Vec<usize>> = rows.iter().map(|(s, _)| ranking(s)).collect();
    let truth: Vec<usize> = rows.iter().map(|r| r.1).collect();
    let got = mrr(&rankings, &truth).unwrap();
    let want = brute_mrr(&rows);
    prop_assert!((got - want).abs() <= 1e-12, "{} vs {}", got, want);
    Ok(())
}
