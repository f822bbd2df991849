//! Point-in-time correctness: every read made for an (entity, anchor) example is
//! audited, and predictions must not change when the future is deleted.

mod common;

use common::audit::{run_audit, shop_cases};
use relicl::time::{MS_PER_DAY, NEG_INF};

#[test]
fn audited_reads_respect_the_anchor() {
    let rep = run_audit(1200);
    assert!(rep.violations.is_empty(), "{:#?}", rep.violations);
    assert!(rep.temporal_labels > 200, "{rep:?}");
    assert!(rep.predictions > 600, "{rep:?}");
    assert!(rep.truncations > 60, "{rep:?}");
    assert!(rep.skipped < rep.draws / 4, "{rep:?}");
}

#[test]
fn truncation_keeps_only_the_past() {
    let cases = shop_cases();
    let store = &cases[0].store;
    let t = 50 * MS_PER_DAY;
    let cut = store.graph.truncate_after(t);
    for (a, b) in store.graph.tables().iter().zip(cut.tables()) {
        let kept = a.times().iter().filter(|&&x| x <= t || x == NEG_INF).count();
        assert_eq!(b.row_count(), kept, "{}", a.name());
        assert!(b.times().iter().all(|&x| x <= t));
    }
}
