//! Dataset loading, splitting and normalization.

use crate::error::{HarnessError, Result};
use deepgp::model::Data;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Per-column affine maps from original to normalized units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

impl Normalization {
    pub fn identity(d: usize, p: usize) -> Self {
        Normalization { x_mean: vec![0.0; d], x_std: vec![1.0; d], y_mean: vec![0.0; p], y_std: vec![1.0; p] }
    }

    /// Column means and population standard deviations. Constant columns
    /// get a scale of 1.
    pub fn fit(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Self {
        let (x_mean, x_std) = column_moments(x);
        let (y_mean, y_std) = column_moments(y);
        Normalization { x_mean, x_std, y_mean, y_std }
    }

    pub fn apply_x(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        affine(x, &self.x_mean, &self.x_std)
    }

    pub fn apply_y(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        affine(y, &self.y_mean, &self.y_std)
    }

    pub fn invert_y(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| y[(i, j)] * self.y_std[j] + self.y_mean[j])
    }

    /// Variances scale by the squared target std.
    pub fn invert_y_var(&self, var: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(var.nrows(), var.ncols(), |i, j| var[(i, j)] * self.y_std[j].powi(2))
    }
}

fn column_moments(m: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = m.nrows() as f64;
    m.column_iter()
        .map(|c| {
            let mean = c.sum() / n;
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            (mean, if sd > 0.0 { sd } else { 1.0 })
        })
        .unzip()
}

fn affine(m: &DMatrix<f64>, mean: &[f64], sd: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| (m[(i, j)] - mean[j]) / sd[j])
}

/// Features and targets in the units given by `normalization`, which maps
/// original units to the stored ones (identity straight after loading).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn new(name: impl Into<String>, x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(HarnessError::invalid(format!("{} feature rows but {} target rows", x.nrows(), y.nrows())));
        }
        let normalization = Normalization::identity(x.ncols(), y.ncols());
        Ok(Dataset { name: name.into(), x, y, normalization })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn num_features(&self) -> usize {
        self.x.ncols()
    }

    pub fn num_targets(&self) -> usize {
        self.y.ncols()
    }

    pub fn rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            x: self.x.select_rows(rows),
            y: self.y.select_rows(rows),
            normalization: self.normalization.clone(),
        }
    }

    /// Targets in original units.
    pub fn original_y(&self) -> DMatrix<f64> {
        self.normalization.invert_y(&self.y)
    }

    pub fn to_data(&self) -> Result<Data> {
        Ok(Data::new(self.x.clone(), self.y.clone())?)
    }
}

/// Fits the normalization on `train` (assumed in original units) and applies
/// it to both sets.
pub fn normalize(train: &Dataset, test: &Dataset) -> (Dataset, Dataset) {
    let norm = Normalization::fit(&train.x, &train.y);
    let map = |d: &Dataset| Dataset {
        name: d.name.clone(),
        x: norm.apply_x(&d.x),
        y: norm.apply_y(&d.y),
        normalization: norm.clone(),
    };
    (map(train), map(test))
}

/// Reads a CSV with a header row. Columns named in `target_columns` become
/// targets, in that order; the rest are features in file order.
pub fn load_csv(path: impl AsRef<Path>, target_columns: &[&str]) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_path(path).map_err(|e| {
        HarnessError::Parse { row: 0, col: 0, message: format!("cannot open {}: {e}", path.display()) }
    })?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| HarnessError::Parse { row: 0, col: 0, message: e.to_string() })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if target_columns.is_empty() {
        return Err(HarnessError::invalid("at least one target column is required"));
    }
    let mut target_idx = Vec::with_capacity(target_columns.len());
    for name in target_columns {
        let idx = header.iter().position(|h| h == name).ok_or_else(|| HarnessError::Parse {
            row: 0,
            col: header.len() + 1,
            message: format!("target column `{name}` not in header"),
        })?;
        target_idx.push(idx);
    }
    let feature_idx: Vec<usize> = (0..header.len()).filter(|i| !target_idx.contains(i)).collect();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| HarnessError::Parse { row, col: 0, message: e.to_string() })?;
        if record.len() != header.len() {
            return Err(HarnessError::Parse {
                row,
                col: record.len().min(header.len()) + 1,
                message: format!("expected {} cells, found {}", header.len(), record.len()),
            });
        }
        let values = record
            .iter()
            .enumerate()
            .map(|(c, cell)| match cell.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(HarnessError::Parse { row, col: c + 1, message: format!("non-numeric cell `{cell}`") }),
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(HarnessError::Parse { row: 1, col: 0, message: "no data rows".into() });
    }
    let n = rows.len();
    let x = DMatrix::from_fn(n, feature_idx.len(), |i, j| rows[i][feature_idx[j]]);
    let y = DMatrix::from_fn(n, target_idx.len(), |i, j| rows[i][target_idx[j]]);
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Dataset::new(name, x, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Shuffled per seed.
    Random,
    /// Leading rows train, trailing rows test, in file order.
    Fixed,
}

/// Splits into `round(fraction · N)` training rows and the rest.
pub fn split(dataset: &Dataset, fraction: f64, seed: u64, mode: SplitMode) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(HarnessError::invalid(format!("split fraction {fraction} outside (0, 1)")));
    }
    let n = dataset.len();
    let n_train = (fraction * n as f64).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(HarnessError::invalid(format!("split of {n} rows at {fraction} leaves one side empty")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if mode == SplitMode::Random {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok((dataset.rows(&order[..n_train]), dataset.rows(&order[n_train..])))
}

/// Noisy draws of a step-plus-sine function of the first input; extra
/// inputs enter linearly with small weights. Inputs uniform on [-2, 2].
pub fn synthetic_step(n: usize, d: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || d == 0 {
        return Err(HarnessError::invalid("synthetic data needs at least one row and one feature"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
    let y = DMatrix::from_fn(n, 1, |i, _| {
        let x0 = x[(i, 0)];
        let step = if x0 > 0.0 { 1.0 } else { -1.0 };
        let rest: f64 = (1..d).map(|j| 0.2 * x[(i, j)] / j as f64).sum();
        let e: f64 = rng.sample(StandardNormal);
        step + 0.5 * (3.0 * x0).sin() + rest + noise_sd * e
    });
    Dataset::new(format!("synthetic_step_{n}x{d}"), x, y)
}

/// Draws from a zero-mean GP with an SE kernel (unit variance, lengthscale
/// `lengthscale`) on inputs uniform on [-3, 3], plus Gaussian noise.
pub fn synthetic_gp(n: usize, lengthscale: f64, noise_sd: f64, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-3.0..3.0));
    let params = deepgp::kernel::KernelParams::new(&[lengthscale], 1.0)?;
    let k = deepgp::kernel::gram(&x, &x, &params)?;
    let chol = deepgp::kernel::chol_psd(&k, deepgp::kernel::default_jitter(&k))?;
    let z = DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
    let e = DMatrix::from_fn(n, 1, |_, _| noise_sd * rng.sample::<f64, _>(StandardNormal));
    let y = &chol.lower * z + e;
    Dataset::new(format!("synthetic_gp_{n}"), x, y)
}

/// The seven-point toy set, already in its working units.
pub fn toy_dataset() -> Dataset {
    Dataset::new("toy", crate::toy::toy_inputs(), crate::toy::toy_targets()).expect("toy shapes agree")
}
