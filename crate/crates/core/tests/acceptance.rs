//! Runs every acceptance criterion and prints one verdict line per criterion.

mod common;

use std::io::Write;
use std::time::Instant;

use common::criteria::{self, Verdict};

#[test]
fn acceptance_criteria() {
    let checks: [(&str, fn() -> Verdict); 7] = [
        ("metric golden values", criteria::golden_metrics),
        ("gradient suite", criteria::gradient_suite),
        ("oracle equivalence", criteria::oracle_equivalence),
        ("overfit smoke test", criteria::overfit),
        ("protocol properties", criteria::protocol),
        ("determinism and persistence", criteria::persistence),
        ("attention invariants", criteria::attention_invariants),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in checks.iter().enumerate() {
        let t0 = Instant::now();
        let v = check();
        let mut out = std::io::stdout().lock();
        writeln!(out, "criterion {} {name}: {v} [{:.1}s]", i + 1, t0.elapsed().as_secs_f64()).unwrap();
        out.flush().unwrap();
        if !v.passed {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
