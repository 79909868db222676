//! Fast sanity check that the pipeline matches the brute-force oracle on a
//! handful of randomized panels (the acceptance suite runs the full battery).

mod common;

use esdid::run::{estimate_prepared, RunConfig};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

#[test]
fn pipeline_matches_oracle_on_random_panels() {
    let mut checked = 0usize;
    for seed in 0..25u64 {
        let generated = common::random_panel(seed);
        let Some((mut panel, flat)) = common::prepare(&generated) else { continue };
        let config = RunConfig { effects: 3, placebos: 2, ..Default::default() };
        let result = match estimate_prepared(&mut panel, &config) {
            Ok(r) => r,
            Err(_) => continue, // degenerate design: nothing estimable
        };
        let oracle = common::oracle(&flat, 3, 2);
        for (i, row) in result.effects.iter().enumerate() {
            let want = oracle.effects.get(i).copied().flatten();
            match (row.estimate, want) {
                (Some(a), Some(b)) => {
                    assert!(close(a, b, 1e-10), "seed {seed} effect {} pipeline {a} oracle {b}", i + 1)
                }
                (a, b) => assert_eq!(a.is_some(), b.is_some(), "seed {seed} effect {} presence", i + 1),
            }
        }
        for (i, row) in result.placebos.iter().enumerate() {
            let want = oracle.placebos.get(i).copied().flatten();
            match (row.estimate, want) {
                (Some(a), Some(b)) => {
                    assert!(close(a, b, 1e-10), "seed {seed} placebo {} pipeline {a} oracle {b}", i + 1)
                }
                (a, b) => assert_eq!(a.is_some(), b.is_some(), "seed {seed} placebo {} presence", i + 1),
            }
        }
        match (result.average_total.as_ref().and_then(|r| r.estimate), oracle.avg_total) {
            (Some(a), Some(b)) => assert!(close(a, b, 1e-10), "seed {seed} avg {a} vs {b}"),
            (a, b) => assert_eq!(a.is_some(), b.is_some(), "seed {seed} avg presence"),
        }
        checked += 1;
    }
    assert!(checked >= 15, "only {checked} panels were usable");
}
