use deepgp::model::PredictiveMixture;
use deepgp_harness::data::{load_csv, normalize, split, synthetic_step, Dataset, Normalization, SplitMode};
use deepgp_harness::error::HarnessError;
use deepgp_harness::run::evaluate_mixture;
use nalgebra::DMatrix;
use proptest::prelude::*;
use std::collections::HashSet;
use std::io::Write;

fn csv_file(text: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
    f.write_all(text.as_bytes()).unwrap();
    f
}

fn parse_location(e: HarnessError) -> (usize, usize) {
    match e {
        HarnessError::Parse { row, col, .. } => (row, col),
        other => panic!("expected a parse error, got {other}"),
    }
}

#[test]
fn three_row_file() {
    let f = csv_file("a,b,y\n1,2,3\n4,5,6\n7,8,9\n");
    let ds = load_csv(f.path(), &["y"]).unwrap();
    assert_eq!((ds.len(), ds.num_features(), ds.num_targets()), (3, 2, 1));
    assert_eq!(ds.x, DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 4.0, 5.0, 7.0, 8.0]));
    assert_eq!(ds.y, DMatrix::from_column_slice(3, 1, &[3.0, 6.0, 9.0]));
}

#[test]
fn target_columns_can_sit_anywhere() {
    let f = csv_file("t,a,u,b\n1,2,3,4\n5,6,7,8\n");
    let ds = load_csv(f.path(), &["u", "t"]).unwrap();
    assert_eq!(ds.x, DMatrix::from_row_slice(2, 2, &[2.0, 4.0, 6.0, 8.0]));
    assert_eq!(ds.y, DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 7.0, 5.0]));
}

#[test]
fn non_numeric_cell_is_located() {
    let f = csv_file("a,b,y\n1,2,3\n4,5,oops\n");
    assert_eq!(parse_location(load_csv(f.path(), &["y"]).unwrap_err()), (2, 3));
}

#[test]
fn ragged_row_is_located() {
    let f = csv_file("a,b,y\n1,2,3\n4,5\n");
    assert_eq!(parse_location(load_csv(f.path(), &["y"]).unwrap_err()).0, 2);
}

#[test]
fn missing_target_column() {
    let f = csv_file("a,b,y\n1,2,3\n");
    assert_eq!(parse_location(load_csv(f.path(), &["z"]).unwrap_err()), (0, 4));
}

#[test]
fn normalized_training_features_are_standardized() {
    let ds = synthetic_step(200, 3, 0.1, 4).unwrap();
    let (train, test) = split(&ds, 0.8, 4, SplitMode::Random).unwrap();
    let (train, _) = normalize(&train, &test);
    for c in train.x.column_iter().chain(train.y.column_iter()) {
        let n = c.len() as f64;
        let mean = c.sum() / n;
        let sd = (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-10 && (sd - 1.0).abs() < 1e-10, "mean {mean}, sd {sd}");
    }
}

#[test]
fn test_side_uses_training_statistics() {
    let ds = synthetic_step(50, 2, 0.1, 5).unwrap();
    let (train, test) = split(&ds, 0.8, 5, SplitMode::Random).unwrap();
    let (_, test_n) = normalize(&train, &test);
    assert_eq!(test_n.normalization, Normalization::fit(&train.x, &train.y));
    assert!((test_n.original_y() - &test.y).amax() < 1e-12);
}

#[test]
fn eighty_twenty_split_of_ten() {
    let ds = synthetic_step(10, 1, 0.1, 0).unwrap();
    let (a, b) = split(&ds, 0.8, 3, SplitMode::Random).unwrap();
    assert_eq!((a.len(), b.len()), (8, 2));
    let (c, d) = split(&ds, 0.8, 3, SplitMode::Random).unwrap();
    assert_eq!((a, b), (c, d));
}

#[test]
fn degenerate_split_is_rejected() {
    let ds = synthetic_step(10, 1, 0.1, 0).unwrap();
    assert!(matches!(split(&ds, 0.999, 0, SplitMode::Random), Err(HarnessError::InvalidArgument(_))));
    assert!(matches!(split(&ds, 0.0, 0, SplitMode::Random), Err(HarnessError::InvalidArgument(_))));
}

#[test]
fn fixed_split_keeps_file_order() {
    let ds = synthetic_step(10, 1, 0.1, 0).unwrap();
    let (a, b) = split(&ds, 0.7, 99, SplitMode::Fixed).unwrap();
    assert_eq!(a.x, ds.x.rows(0, 7).into_owned());
    assert_eq!(b.x, ds.x.rows(7, 3).into_owned());
}

fn scaled(s: f64, shift: f64) -> Normalization {
    Normalization { x_mean: vec![0.0], x_std: vec![1.0], y_mean: vec![shift], y_std: vec![s] }
}

#[test]
fn perfect_predictions_have_zero_rmse() {
    let y = DMatrix::from_column_slice(3, 1, &[0.5, -1.0, 2.0]);
    let mix = PredictiveMixture::new(vec![(y.clone(), DMatrix::from_element(3, 1, 0.04))]).unwrap();
    let (_, rmse) = evaluate_mixture(&mix, &y, &Normalization::identity(1, 1)).unwrap();
    assert_eq!(rmse, 0.0);
}

#[test]
fn two_component_mixture_by_hand() {
    let mix = PredictiveMixture::new(vec![
        (DMatrix::from_element(1, 1, 0.0), DMatrix::from_element(1, 1, 1.0)),
        (DMatrix::from_element(1, 1, 2.0), DMatrix::from_element(1, 1, 4.0)),
    ])
    .unwrap();
    let y = DMatrix::from_element(1, 1, 1.0);
    let (mll, rmse) = evaluate_mixture(&mix, &y, &Normalization::identity(1, 1)).unwrap();
    let normal = |y: f64, m: f64, v: f64| (-(y - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
    let hand = (0.5 * normal(1.0, 0.0, 1.0) + 0.5 * normal(1.0, 2.0, 4.0)).ln();
    assert!((mll - hand).abs() < 1e-12);
    assert!(rmse.abs() < 1e-12);
}

#[test]
fn denormalization_shifts_mll_by_log_std() {
    let y_norm = DMatrix::from_column_slice(4, 1, &[0.1, -0.3, 1.2, 0.0]);
    let mix = PredictiveMixture::new(vec![
        (DMatrix::from_column_slice(4, 1, &[0.0, 0.2, 1.0, -0.5]), DMatrix::from_element(4, 1, 0.3)),
        (DMatrix::from_column_slice(4, 1, &[0.3, -0.1, 0.8, 0.4]), DMatrix::from_element(4, 1, 0.6)),
    ])
    .unwrap();
    let (mll0, rmse0) = evaluate_mixture(&mix, &y_norm, &Normalization::identity(1, 1)).unwrap();
    let s = 3.7;
    let norm = scaled(s, -2.0);
    let (mll, rmse) = evaluate_mixture(&mix, &norm.invert_y(&y_norm), &norm).unwrap();
    assert!((mll - (mll0 - s.ln())).abs() < 1e-10);
    assert!((rmse - s * rmse0).abs() < 1e-10);
}

proptest! {
    #[test]
    fn splits_are_disjoint_and_exhaustive(n in 2usize..60, frac in 0.05f64..0.95, seed in 0u64..1000) {
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64);
        let ds = Dataset::new("ids", x.clone(), x).unwrap();
        let n_train = (frac * n as f64).round() as usize;
        match split(&ds, frac, seed, SplitMode::Random) {
            Ok((a, b)) => {
                let ids: Vec<usize> = a.x.iter().chain(b.x.iter()).map(|&v| v as usize).collect();
                let unique: HashSet<usize> = ids.iter().copied().collect();
                prop_assert_eq!(ids.len(), n);
                prop_assert_eq!(unique.len(), n);
                prop_assert_eq!(a.len(), n_train);
            }
            Err(_) => prop_assert!(n_train == 0 || n_train == n),
        }
    }

    #[test]
    fn normalization_round_trips(vals in proptest::collection::vec(-1e3f64..1e3, 3..40)) {
        let n = vals.len();
        let y = DMatrix::from_column_slice(n, 1, &vals);
        let norm = Normalization::fit(&DMatrix::zeros(n, 1), &y);
        prop_assert!((norm.invert_y(&norm.apply_y(&y)) - &y).amax() < 1e-9);
    }
}
