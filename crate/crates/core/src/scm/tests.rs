use super::*;
use crate::colstore::save_store;

fn store_bytes(graph: &TemporalGraph) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("db.rlct");
    save_store(&Store::build(graph.clone()), &path).unwrap();
    std::fs::read(path).unwrap()
}

#[test]
fn same_seed_gives_identical_database() {
    let cfg = ScmConfig::default();
    let a = sample_database(&cfg, 11).unwrap();
    let b = sample_database(&cfg, 11).unwrap();
    assert_eq!(store_bytes(&a.graph), store_bytes(&b.graph));
    assert_eq!(a.latent, b.latent);
    let c = sample_database(&cfg, 12).unwrap();
    assert_ne!(store_bytes(&a.graph), store_bytes(&c.graph));
}

#[test]
fn single_table_config_has_no_links() {
    let cfg = ScmConfig::default().single_table();
    let db = sample_database(&cfg, 1).unwrap();
    assert_eq!(db.graph.tables().len(), 1);
    assert!(db.graph.schema().links.is_empty());
}

#[test]
fn child_row_mean_matches_config() {
    let cfg = ScmConfig {
        n_entities: 10_000,
        child_tables: (1, 1),
        rows_per_entity: 3.5,
        ..ScmConfig::default()
    };
    let db = sample_database(&cfg, 5).unwrap();
    let mean = db.graph.table(1).row_count() as f64 / 10_000.0;
    assert!((mean - 3.5).abs() / 3.5 < 0.05, "mean {mean}");
}

#[test]
fn invalid_configs_are_rejected() {
    let base = ScmConfig::default();
    for cfg in [
        ScmConfig {
            n_entities: 0,
            ..base.clone()
        },
        ScmConfig {
            noise_scale: -1.0,
            ..base.clone()
        },
        ScmConfig {
            features: (0, 2),
            ..base.clone()
        },
        ScmConfig {
            nonlinearities: vec![],
            ..base.clone()
        },
    ] {
        assert!(matches!(sample_database(&cfg, 0), Err(ScmError::Config(_))));
    }
}

#[test]
fn forward_replay_reproduces_stored_values() {
    let db = sample_database(&ScmConfig::default(), 7).unwrap();
    let vals = forward_values(&db.latent);
    for (t, table) in db.latent.tables.iter().enumerate() {
        assert_eq!(vals[t], table.values);
    }
}

#[test]
fn static_labels_recompute_from_mechanisms() {
    let cfg = ScmConfig::default();
    for seed in 0..6 {
        let db = sample_database(&cfg, seed).unwrap();
        for family in [
            TaskFamily::StaticBinary,
            TaskFamily::StaticMulticlass,
            TaskFamily::StaticRegression,
        ] {
            let task = sample_task_of(&db, &cfg, family, seed).unwrap();
            let labels = recompute_static_labels(&task, &db.latent).unwrap();
            let emitted: Vec<f64> = task.rows.iter().map(|r| r.target.unwrap()).collect();
            assert_eq!(labels, emitted, "{family:?} seed {seed}");
        }
    }
}

#[test]
fn binary_tasks_have_both_classes() {
    let cfg = ScmConfig::default();
    for seed in 0..5 {
        let db = sample_database(&cfg, seed).unwrap();
        let task = sample_task_of(&db, &cfg, TaskFamily::StaticBinary, seed).unwrap();
        let pos = task.rows.iter().filter(|r| r.target == Some(1.0)).count();
        assert_eq!(pos, task.rows.len() / 2);
        assert_eq!(task.plan.task_type, TaskType::Binary);
        let reg = sample_task_of(&db, &cfg, TaskFamily::StaticRegression, seed).unwrap();
        assert_eq!(reg.plan.task_type, TaskType::Regression);
    }
}

#[test]
fn temporal_labels_match_event_log() {
    let cfg = ScmConfig {
        child_tables: (1, 1),
        ..ScmConfig::default()
    };
    let db = sample_database(&cfg, 9).unwrap();
    let task = sample_task_of(&db, &cfg, TaskFamily::TemporalCount, 9).unwrap();
    let child = &db.latent.tables[1];
    let w = task.plan.window_len_ms();
    for row in task.rows.iter().step_by(7) {
        let expect = child
            .parent_rows
            .iter()
            .zip(&child.times)
            .filter(|&(&p, &t)| p == row.entity && EPOCH_MS + t > row.anchor && EPOCH_MS + t <= row.anchor + w)
            .count();
        assert_eq!(row.target, Some(expect as f64));
    }
}

#[test]
fn sampled_tasks_are_deterministic() {
    let cfg = ScmConfig::default();
    let db = sample_database(&cfg, 2).unwrap();
    let a = sample_task(&db, &cfg, 4).unwrap();
    let b = sample_task(&db, &cfg, 4).unwrap();
    assert_eq!(a.family, b.family);
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.plan, b.plan);
}
