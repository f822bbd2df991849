//! Acceptance run: every criterion at its stated tolerance, one PASS/FAIL line each.
//!
//! A toy model is pre-trained once and shared by the criteria that need trained
//! weights. The store throughput criterion is a soft gate: it is reported but does not
//! fail the run.

mod common;

use std::path::Path;
use std::time::Instant;

use proptest::test_runner::{Config, TestRunner};
use relicl::cli::{manifest_path, run};
use relicl::colstore::{synthetic_store, Store};
use relicl::icl_model::{
    fine_tune, gradient_check, pretrain, FineTuneConfig, Model, ModelConfig, PredictOptions, Prediction,
    PretrainConfig, PretrainReport,
};
use relicl::metrics::{
    auroc, conjunction_benchmark, mae, mrr, ranking, run_ablation, AblationReport, AblationSpec, ConjunctionConfig,
    Sweep, TaskSource,
};
use relicl::pql::{TaskPlan, TaskType};
use relicl::scm::{sample_database, sample_task_of, ScmConfig, TaskFamily};
use relicl::taskgen::{holdout_split, TaskRow};

use common::{audit, oracle, pqlgen, roundtrip};

const PRETRAIN_STEPS: u64 = 8000;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    id: &'static str,
    soft: bool,
    pass: bool,
    detail: String,
}

fn report(outcomes: &mut Vec<Outcome>, id: &'static str, soft: bool, pass: bool, detail: String) {
    let tag = match (pass, soft) {
        (true, _) => "PASS",
        (false, false) => "FAIL",
        (false, true) => "SOFT-FAIL",
    };
    println!("[{tag}] {id}: {detail}");
    outcomes.push(Outcome { id, soft, pass, detail });
}

fn pretrained() -> (Model, PretrainReport) {
    let mut model = Model::new(ModelConfig::toy(), 0).unwrap();
    let cfg = PretrainConfig {
        steps: PRETRAIN_STEPS,
        ..PretrainConfig::default()
    };
    let rep = pretrain(&mut model, &cfg).unwrap();
    (model, rep)
}

fn c1_conjunction(out: &mut Vec<Outcome>, model: &Model, pretrain_seconds: f64) {
    let start = Instant::now();
    let cfg = ConjunctionConfig::default();
    let mut ok = cfg.n_entities == 2000;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let r = conjunction_benchmark(model, &cfg, seed).unwrap();
        ok &= (0.45..=0.60).contains(&r.dfs_auroc) && r.model_auroc >= 0.95;
        parts.push(format!("seed {seed}: dfs {:.3} icl {:.3}", r.dfs_auroc, r.model_auroc));
    }
    let total = pretrain_seconds + start.elapsed().as_secs_f64();
    ok &= total <= 900.0;
    report(
        out,
        "C1 conjunction expressivity",
        false,
        ok,
        format!("{} ({total:.0}s incl. pre-training, limit 900s)", parts.join("; ")),
    );
}

fn c2_leakage(out: &mut Vec<Outcome>) {
    let rep = audit::run_audit(1200);
    let ok = rep.violations.is_empty() && rep.draws >= 1000 && rep.truncations > 0 && rep.temporal_labels > 0;
    report(
        out,
        "C2 no leakage",
        false,
        ok,
        format!(
            "{} draws, {} temporal labels, {} audited predictions, {} truncation comparisons, {} violations{}",
            rep.draws,
            rep.temporal_labels,
            rep.predictions,
            rep.truncations,
            rep.violations.len(),
            rep.violations
                .first()
                .map(|v| format!(" (first: {v})"))
                .unwrap_or_default()
        ),
    );
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

fn c3_oracles(out: &mut Vec<Outcome>) {
    const CASES: u32 = 256;
    let results = [
        (
            "neighbors_before",
            runner(CASES)
                .run(&oracle::neighbors_case(), oracle::check_neighbors_before)
                .map_err(|e| e.to_string()),
        ),
        (
            "snapshot",
            runner(CASES)
                .run(&oracle::snapshot_case(), oracle::check_snapshot)
                .map_err(|e| e.to_string()),
        ),
        (
            "compute_label",
            runner(CASES)
                .run(&oracle::label_case(), oracle::check_compute_label)
                .map_err(|e| e.to_string()),
        ),
        (
            "auroc",
            runner(CASES)
                .run(&oracle::auroc_case(), oracle::check_auroc)
                .map_err(|e| e.to_string()),
        ),
        (
            "mrr",
            runner(CASES)
                .run(&oracle::mrr_case(), oracle::check_mrr)
                .map_err(|e| e.to_string()),
        ),
    ];
    let failed: Vec<String> = results
        .iter()
        .filter_map(|(name, r)| r.as_ref().err().map(|e| format!("{name}: {e}")))
        .collect();
    report(
        out,
        "C3 oracle equivalence",
        false,
        failed.is_empty(),
        if failed.is_empty() {
            format!("5 routines x {CASES} random instances match brute force")
        } else {
            failed.join("; ")
        },
    );
}

fn scm_task(family: TaskFamily, n_entities: usize, seed: u64) -> (Store, TaskPlan, Vec<TaskRow>) {
    let cfg = ScmConfig {
        n_entities,
        rows_per_entity: 3.0,
        ..ScmConfig::default()
    };
    let db = sample_database(&cfg, seed).unwrap();
    let task = sample_task_of(&db, &cfg, family, seed).unwrap();
    let rows = task.rows.into_iter().filter(|r| r.target.is_some()).collect();
    (Store::build(task.graph), task.plan, rows)
}

fn tiny() -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        table_blocks: 1,
        graph_blocks: 2,
        cross_blocks: 1,
        inducing: 2,
        mlp_ratio: 2,
        max_flat_classes: 16,
        context_budget: 4096,
    }
}

fn c4_gradients(out: &mut Vec<Outcome>) {
    const STAGES: [&str; 5] = ["table", "graph", "cross", "embed", "head"];
    let heads = [
        ("flat", TaskFamily::StaticMulticlass, 16usize),
        ("hierarchical", TaskFamily::StaticMulticlass, 2),
        ("regression", TaskFamily::StaticRegression, 16),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, (head, family, max_flat)) in heads.into_iter().enumerate() {
        let seed = 13 + i as u64;
        let (store, plan, rows) = scm_task(family, 40, seed);
        let (ctx, pred) = (&rows[..16], &rows[16..22]);
        let model = Model::new(
            ModelConfig {
                max_flat_classes: max_flat,
                ..tiny()
            },
            seed,
        )
        .unwrap();
        let opts = PredictOptions::with_fanouts(&[3, 2]);
        let rep = gradient_check(&model, &store, &plan, ctx, pred, &opts, &STAGES, 3, seed).unwrap();
        ok &= rep.groups.iter().all(|g| g.checked > 0) && rep.max_rel_error() < 1e-4;
        parts.push(format!("{head} {:.1e} over {}", rep.max_rel_error(), rep.checked()));
    }
    report(
        out,
        "C4 gradient checks",
        false,
        ok,
        format!(
            "max relative error (limit 1e-4) per head, all stages: {}",
            parts.join("; ")
        ),
    );
}

fn max_diff(a: &[Prediction], b: &[Prediction]) -> f64 {
    let mut d: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        d = d.max((x.prediction - y.prediction).abs());
        if let (Some(p), Some(q)) = (&x.probabilities, &y.probabilities) {
            for (u, v) in p.iter().zip(q) {
                d = d.max((u - v).abs());
            }
        }
        for (u, v) in x.embedding.iter().zip(&y.embedding) {
            d = d.max((u - v).abs());
        }
    }
    d
}

fn c5_symmetry(out: &mut Vec<Outcome>, model: &Model) {
    let opts = PredictOptions::with_fanouts(&[4, 2]);
    let (mut col, mut order, mut class, mut dup) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for seed in SEEDS {
        for family in [
            TaskFamily::StaticMulticlass,
            TaskFamily::StaticRegression,
            TaskFamily::TemporalBinary,
        ] {
            let (store, plan, rows) = scm_task(family, 60, 100 + seed);
            let (ctx, pred) = rows.split_at(rows.len() * 2 / 3);
            let pred = &pred[..pred.len().min(24)];
            let base = model.predict(&store, &plan, ctx, pred, &opts).unwrap();

            let shuffled = PredictOptions {
                column_shuffle: Some(seed + 99),
                ..opts.clone()
            };
            col = col.max(max_diff(
                &base,
                &model.predict(&store, &plan, ctx, pred, &shuffled).unwrap(),
            ));

            let mut rev = ctx.to_vec();
            rev.reverse();
            order = order.max(max_diff(
                &base,
                &model.predict(&store, &plan, &rev, pred, &opts).unwrap(),
            ));

            let doubled: Vec<TaskRow> = ctx.iter().chain(ctx).cloned().collect();
            dup = dup.max(max_diff(
                &base,
                &model.predict(&store, &plan, &doubled, pred, &opts).unwrap(),
            ));

            if plan.task_type != TaskType::Regression {
                let k = plan.n_classes();
                let perm: Vec<usize> = (0..k).map(|c| (c + 1) % k).collect();
                let relabeled: Vec<TaskRow> = ctx
                    .iter()
                    .map(|r| TaskRow {
                        target: r.target.map(|y| perm[y as usize] as f64),
                        ..r.clone()
                    })
                    .collect();
                let moved = model.predict(&store, &plan, &relabeled, pred, &opts).unwrap();
                for (a, b) in base.iter().zip(&moved) {
                    let (pa, pb) = (a.probabilities.as_ref().unwrap(), b.probabilities.as_ref().unwrap());
                    for c in 0..k {
                        class = class.max((pa[c] - pb[perm[c]]).abs());
                    }
                }
            }
        }
    }
    let ok = col < 1e-9 && order < 1e-9 && class < 1e-6 && dup < 1e-6;
    report(
        out,
        "C5 symmetry",
        false,
        ok,
        format!(
            "column permutation {col:.1e} (<1e-9), context order {order:.1e} (<1e-9), class permutation {class:.1e} (<1e-6), duplication {dup:.1e} (<1e-6)"
        ),
    );
}

fn score(plan: &TaskPlan, preds: &[Prediction], eval: &[TaskRow]) -> f64 {
    let truth: Vec<f64> = eval.iter().map(|r| r.target.unwrap()).collect();
    match plan.task_type {
        TaskType::Binary => auroc(&preds.iter().map(|p| p.prediction).collect::<Vec<_>>(), &truth).unwrap(),
        TaskType::Multiclass => {
            let ranks: Vec<Vec<usize>> = preds
                .iter()
                .map(|p| ranking(p.probabilities.as_ref().unwrap()))
                .collect();
            mrr(&ranks, &truth.iter().map(|&y| y as usize).collect::<Vec<_>>()).unwrap()
        }
        // Negated so that larger is better for every task type.
        TaskType::Regression => -mae(&preds.iter().map(|p| p.prediction).collect::<Vec<_>>(), &truth).unwrap(),
    }
}

fn c6_training(out: &mut Vec<Outcome>, model: &Model, pre: &PretrainReport) {
    let ratio = pre.eval_before / pre.eval_after;
    let pre_ok = ratio >= 2.0 && pre.seconds <= 600.0;
    let cfg = ScmConfig {
        n_entities: 200,
        rows_per_entity: 4.0,
        ..ScmConfig::default()
    };
    let ft = FineTuneConfig::default();
    let opts = PredictOptions::with_fanouts(&ft.fanouts);
    let mut wins = 0;
    let mut slowest: f64 = 0.0;
    let mut parts = Vec::new();
    for family in TaskFamily::ALL {
        let db = sample_database(&cfg, 7).unwrap();
        let task = sample_task_of(&db, &cfg, family, 7).unwrap();
        let store = Store::build(task.graph);
        let labeled: Vec<TaskRow> = task.rows.into_iter().filter(|r| r.target.is_some()).collect();
        let split = holdout_split(&labeled, 0.3, family.is_temporal(), 7).unwrap();
        let ctx = &split.context[..split.context.len().min(256)];
        let eval = &split.eval[..split.eval.len().min(256)];
        let (tuned, rep) = fine_tune(model, &store, &task.plan, &split.context, &ft).unwrap();
        let base_score = score(
            &task.plan,
            &model.predict(&store, &task.plan, ctx, eval, &opts).unwrap(),
            eval,
        );
        let tuned_score = score(
            &task.plan,
            &tuned.predict(&store, &task.plan, ctx, eval, &opts).unwrap(),
            eval,
        );
        wins += usize::from(tuned_score >= base_score);
        slowest = slowest.max(rep.seconds);
        parts.push(format!(
            "{} {base_score:.3}->{tuned_score:.3} in {:.0}s",
            family.as_str(),
            rep.seconds
        ));
    }
    let ok = pre_ok && wins >= 4 && slowest < 120.0;
    report(
        out,
        "C6 training signal",
        false,
        ok,
        format!(
            "eval loss {:.3} -> {:.3} ({ratio:.2}x, need 2x) in {:.0}s (limit 600s); fine-tune >= base on {wins}/5 (need 4), slowest {slowest:.0}s (limit 120s): {}",
            pre.eval_before,
            pre.eval_after,
            pre.seconds,
            parts.join(", ")
        ),
    );
}

fn ablation(model: &Model, sweep: Sweep, source: TaskSource, grid: &[f64]) -> AblationReport {
    let mut spec = AblationSpec::new(sweep, source);
    spec.grid = grid.to_vec();
    spec.seeds = SEEDS.to_vec();
    run_ablation(model, &spec).unwrap()
}

fn means(r: &AblationReport) -> String {
    r.points
        .iter()
        .map(|p| format!("{}:{:.3}±{:.3}", p.x, p.mean, p.stderr))
        .collect::<Vec<_>>()
        .join(" ")
}

fn c7_robustness(out: &mut Vec<Outcome>, model: &Model) {
    let fan = ablation(
        model,
        Sweep::Fanout,
        TaskSource::long_memory(),
        &[1.0, 2.0, 4.0, 8.0, 16.0, 32.0],
    );
    let fan_ok = fan.points.windows(2).all(|w| w[1].mean >= w[0].mean);

    let depth = ablation(model, Sweep::Depth, TaskSource::multi_table(), &[0.0, 2.0]);
    let depth_ok = depth.points[1].mean > depth.points[0].mean;

    // Full edge drop against zero hops, same tasks and seeds: the per-seed spread of
    // the difference bounds the allowed gap.
    let drop = ablation(model, Sweep::EdgeDrop, TaskSource::multi_table(), &[1.0]);
    let (d, z) = (&drop.points[0], &depth.points[0]);
    let gap = d.mean - z.mean;
    let spread = (d.std.powi(2) + z.std.powi(2)).sqrt();
    let drop_ok = gap.abs() <= spread;

    let noise = ablation(model, Sweep::NoiseColumns, TaskSource::multi_table(), &[0.0, 16.0]);
    let loss = noise.points[0].mean - noise.points[1].mean;
    let noise_ok = loss <= 0.05;

    report(
        out,
        "C7 robustness shapes",
        false,
        fan_ok && depth_ok && drop_ok && noise_ok,
        format!(
            "fanout (non-decreasing: {fan_ok}) {}; depth 0 vs 2 (strictly better: {depth_ok}) {}; edge drop 100% vs depth 0 gap {gap:.3} within seed spread {spread:.3}: {drop_ok}; 16 noise columns cost {:.1} AUROC points (limit 5): {noise_ok}",
            means(&fan),
            means(&depth),
            100.0 * loss
        ),
    );
}

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("relicl").chain(args.iter().copied()))
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Runs every subcommand once at small scale and replays each manifest.
fn cli_runs_replay(tmp: &Path) -> Result<usize, String> {
    let csv = tmp.join("csv");
    std::fs::create_dir_all(&csv).unwrap();
    common::write_shop_csv(&csv);
    let store = tmp.join("shop.rlst");
    let query = "PREDICT COUNT(orders.*, 0, 30, days) > 0 FOR EACH users.user_id";
    let ckpt = tmp.join("ckpt");
    let outputs = [
        tmp.join("shop.rlst"),
        tmp.join("ckpt"),
        tmp.join("pred.jsonl"),
        tmp.join("tuned"),
        tmp.join("eval.json"),
        tmp.join("abl"),
        tmp.join("bench.json"),
    ];
    let (st, ck) = (s(&store), s(&ckpt));
    let runs: Vec<Vec<String>> = vec![
        vec!["ingest".into(), s(&csv), "--store".into(), st.clone()],
        vec![
            "pretrain".into(),
            "--steps".into(),
            "4".into(),
            "--out".into(),
            ck.clone(),
        ],
        vec![
            "predict",
            "--store",
            &st,
            "--query",
            query,
            "--indices",
            "u1,u2,u3",
            "--anchor-time",
            "2026-03-01",
            "--num-neighbors",
            "4,4",
            "--checkpoint",
            &ck,
            "--out",
            &s(&outputs[2]),
        ]
        .into_iter()
        .map(String::from)
        .collect(),
        vec![
            "finetune",
            "--store",
            &st,
            "--query",
            query,
            "--anchor-time",
            "2026-03-20",
            "--rows",
            "60",
            "--steps",
            "3",
            "--checkpoint",
            &ck,
            "--out",
            &s(&outputs[3]),
        ]
        .into_iter()
        .map(String::from)
        .collect(),
        vec![
            "evaluate",
            "--entities",
            "200",
            "--seeds",
            "0",
            "--num-neighbors",
            "4,4",
            "--checkpoint",
            &ck,
            "--out",
            &s(&outputs[4]),
        ]
        .into_iter()
        .map(String::from)
        .collect(),
        vec![
            "ablate",
            "--sweep",
            "fanout",
            "--grid",
            "1,4",
            "--context-size",
            "16",
            "--eval-rows",
            "16",
            "--checkpoint",
            &ck,
            "--out",
            &s(&outputs[5]),
        ]
        .into_iter()
        .map(String::from)
        .collect(),
        vec![
            "bench-store",
            "--edges",
            "20000",
            "--parents",
            "500",
            "--lookups",
            "5000",
            "--out",
            &s(&outputs[6]),
        ]
        .into_iter()
        .map(String::from)
        .collect(),
    ];
    for (args, output) in runs.iter().zip(&outputs) {
        let argv: Vec<&str> = args.iter().map(String::as_str).collect();
        if cli(&argv) != 0 {
            return Err(format!("{} failed", args[0]));
        }
        if cli(&["replay", &s(&manifest_path(output))]) != 0 {
            return Err(format!("{} did not replay", args[0]));
        }
    }
    Ok(runs.len())
}

fn c8_formats(out: &mut Vec<Outcome>) {
    let store_ok = runner(64)
        .run(&(oracle::database()), |(joined, orders)| {
            proptest::prop_assert!(roundtrip::round_trip(&common::shop(&joined, &orders)));
            Ok(())
        })
        .is_ok()
        && (0..4).all(|seed| {
            let db = sample_database(&ScmConfig::default(), seed).unwrap();
            roundtrip::round_trip(&Store::build(db.graph))
        });
    let tmp = tempfile::tempdir().unwrap();
    let cli_result = cli_runs_replay(tmp.path());
    let pql = runner(1000).run(&pqlgen::query(), pqlgen::check_fixpoint);
    report(
        out,
        "C8 formats and determinism",
        false,
        store_ok && cli_result.is_ok() && pql.is_ok(),
        format!(
            "store round trip bit-exact: {store_ok}; CLI replay: {}; PQL fixpoint on 1000 queries: {}",
            match &cli_result {
                Ok(n) => format!("{n}/{n} commands reproduced"),
                Err(e) => e.clone(),
            },
            match &pql {
                Ok(()) => "ok".to_string(),
                Err(e) => e.to_string(),
            }
        ),
    );
}

fn c9_store_speed(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let store = synthetic_store(1_000_000, 10_000_000, 0);
    let build = start.elapsed().as_secs_f64();
    let (rate, found) = relicl::cli::bench_lookups(&store, 1_000_000, 32, 0);
    report(
        out,
        "C9 store throughput (soft)",
        true,
        rate >= 1e6,
        format!("{rate:.0} neighbors_before lookups/sec on 10M edges (target 1M), {found} neighbors returned, store built in {build:.1}s"),
    );
}

#[test]
fn acceptance() {
    let mut outcomes = Vec::new();
    let (model, pre) = pretrained();
    c1_conjunction(&mut outcomes, &model, pre.seconds);
    c2_leakage(&mut outcomes);
    c3_oracles(&mut outcomes);
    c4_gradients(&mut outcomes);
    c5_symmetry(&mut outcomes, &model);
    c6_training(&mut outcomes, &model, &pre);
    c7_robustness(&mut outcomes, &model);
    c8_formats(&mut outcomes);
    c9_store_speed(&mut outcomes);

    println!("\nacceptance summary");
    for o in &outcomes {
        let tag = if o.pass {
            "PASS"
        } else if o.soft {
            "SOFT-FAIL"
        } else {
            "FAIL"
        };
        println!("  {tag:<9} {}", o.id);
    }
    let hard: Vec<&Outcome> = outcomes.iter().filter(|o| !o.pass && !o.soft).collect();
    assert!(
        hard.is_empty(),
        "failed criteria: {}",
        hard.iter()
            .map(|o| format!("{} ({})", o.id, o.detail))
            .collect::<Vec<_>>()
            .join("; ")
    );
}
