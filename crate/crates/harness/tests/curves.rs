mod common;

use common::{quick, small_data};
use deepgp_harness::config::Method;
use deepgp_harness::curves::{emit_curves, write_curves, HEADER};
use deepgp_harness::error::HarnessError;
use deepgp_harness::run::{run_experiment, CurvePoint};
use std::collections::HashMap;

fn point(method: &str, iteration: usize, t: f64) -> CurvePoint {
    CurvePoint { method: method.into(), iteration, wall_clock_s: t, metric_name: "test_mll".into(), value: -1.0 }
}

#[test]
fn two_methods_three_checkpoints() {
    let points: Vec<_> = ["a", "b"].iter().flat_map(|m| (0..3).map(move |i| point(m, i * 10, i as f64))).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("curves.tsv");
    emit_curves(&points, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[0], HEADER);
    assert!(lines[1..].iter().all(|l| l.split('\t').count() == 5));
    assert_eq!(lines[2], "a\t10\t1.000000\ttest_mll\t-1.0");
}

#[test]
fn empty_records_are_rejected() {
    assert!(matches!(write_curves(&[], Vec::new()), Err(HarnessError::InvalidArgument(_))));
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(emit_curves(&[], dir.path().join("c.tsv")), Err(HarnessError::InvalidArgument(_))));
}

#[test]
fn unwritable_path_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("missing").join("c.tsv");
    assert!(matches!(emit_curves(&[point("a", 0, 0.0)], path), Err(HarnessError::Io(_))));
}

#[test]
fn run_timestamps_never_decrease_per_method() {
    let data = small_data();
    let mut points = Vec::new();
    for method in [Method::SghmcDgp, Method::DsviDgp] {
        points.extend(run_experiment(&quick(method), &data).unwrap().0.curves);
    }
    let mut last: HashMap<String, f64> = HashMap::new();
    for p in &points {
        let prev = last.insert(p.method.clone(), p.wall_clock_s).unwrap_or(0.0);
        assert!(p.wall_clock_s >= prev, "{} went from {prev} to {}", p.method, p.wall_clock_s);
    }
    assert_eq!(last.len(), 2);
}
