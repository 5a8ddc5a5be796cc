//! Squared-exponential ARD covariance and the positive-semidefinite linear
//! algebra shared by every layer.
//!
//! Points are stored as matrix rows. All routines are pure functions.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DgpError, Result};

/// Jitter relative to the mean diagonal used when no explicit value is given.
pub const DEFAULT_RELATIVE_JITTER: f64 = 1e-6;
/// Largest jitter, relative to the mean diagonal, tried before giving up.
pub const RELATIVE_JITTER_CEILING: f64 = 1e-2;

/// Hyperparameters of the squared-exponential ARD kernel, stored in log space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub log_lengthscales: DVector<f64>,
    pub log_signal_variance: f64,
}

impl KernelParams {
    pub fn new(lengthscales: &[f64], signal_variance: f64) -> Result<Self> {
        if lengthscales.iter().any(|&l| !(l > 0.0)) || !(signal_variance > 0.0) {
            return Err(DgpError::invalid(
                "lengthscales and signal variance must be positive",
            ));
        }
        Ok(KernelParams {
            log_lengthscales: DVector::from_iterator(
                lengthscales.len(),
                lengthscales.iter().map(|l| l.ln()),
            ),
            log_signal_variance: signal_variance.ln(),
        })
    }

    /// Unit lengthscales and unit signal variance.
    pub fn isotropic(dim: usize) -> Self {
        KernelParams {
            log_lengthscales: DVector::zeros(dim),
            log_signal_variance: 0.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn signal_variance(&self) -> f64 {
        self.log_signal_variance.exp()
    }

    pub fn lengthscales(&self) -> DVector<f64> {
        self.log_lengthscales.map(f64::exp)
    }
}

/// k(x, x') = s * exp(-0.5 * sum_d (x_d - x'_d)^2 / l_d^2)
pub fn se_ard(x: &[f64], x_prime: &[f64], params: &KernelParams) -> Result<f64> {
    let dim = params.input_dim();
    if x.len() != dim || x_prime.len() != dim {
        return Err(DgpError::invalid(format!(
            "point dimensions ({}, {}) do not match kernel dimension {dim}",
            x.len(),
            x_prime.len()
        )));
    }
    let mut r2 = 0.0;
    for d in 0..dim {
        let inv_l = (-params.log_lengthscales[d]).exp();
        let diff = (x[d] - x_prime[d]) * inv_l;
        r2 += diff * diff;
    }
    Ok(params.signal_variance() * (-0.5 * r2).exp())
}

/// Cross-covariance matrix with entry (i, j) = k(a_i, b_j).
pub fn gram(a: &DMatrix<f64>, b: &DMatrix<f64>, params: &KernelParams) -> Result<DMatrix<f64>> {
    let dim = params.input_dim();
    if a.ncols() != dim || b.ncols() != dim {
        return Err(DgpError::invalid(format!(
            "point sets have {} and {} columns, kernel expects {dim}",
            a.ncols(),
            b.ncols()
        )));
    }
    let inv_l: Vec<f64> = params.log_lengthscales.iter().map(|l| (-l).exp()).collect();
    let scaled_a = scale_columns(a, &inv_l);
    let scaled_b = scale_columns(b, &inv_l);
    let var = params.signal_variance();
    Ok(DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        let mut r2 = 0.0;
        for d in 0..dim {
            let diff = scaled_a[(i, d)] - scaled_b[(j, d)];
            r2 += diff * diff;
        }
        var * (-0.5 * r2).exp()
    }))
}

fn scale_columns(m: &DMatrix<f64>, factors: &[f64]) -> DMatrix<f64> {
    let mut out = m.clone();
    for (d, mut col) in out.column_iter_mut().enumerate() {
        col *= factors[d];
    }
    out
}

/// Lower Cholesky factor of `A + jitter_used * I`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholFactor {
    pub lower: DMatrix<f64>,
    pub jitter_used: f64,
}

impl CholFactor {
    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// log det(L Lᵀ)
    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// `DEFAULT_RELATIVE_JITTER` times the mean diagonal of `a`.
pub fn default_jitter(a: &DMatrix<f64>) -> f64 {
    DEFAULT_RELATIVE_JITTER * diagonal_scale(a)
}

fn diagonal_scale(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 1.0;
    }
    let s = a.diagonal().iter().map(|d| d.abs()).sum::<f64>() / a.nrows() as f64;
    if s > 0.0 && s.is_finite() {
        s
    } else {
        1.0
    }
}

/// Cholesky factorization with geometric (x10) jitter escalation starting at
/// `base_jitter`, capped at `RELATIVE_JITTER_CEILING` times the mean diagonal.
pub fn chol_psd(a: &DMatrix<f64>, base_jitter: f64) -> Result<CholFactor> {
    let ceiling = (RELATIVE_JITTER_CEILING * diagonal_scale(a)).max(base_jitter);
    chol_psd_with_ceiling(a, base_jitter, ceiling)
}

pub fn chol_psd_with_ceiling(
    a: &DMatrix<f64>,
    base_jitter: f64,
    ceiling: f64,
) -> Result<CholFactor> {
    if !a.is_square() {
        return Err(DgpError::invalid(format!(
            "cholesky of non-square {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    if !(base_jitter >= 0.0) {
        return Err(DgpError::invalid("base jitter must be nonnegative"));
    }
    let scale = a.norm().max(f64::MIN_POSITIVE);
    if (a - a.transpose()).norm() > 1e-10 * scale {
        return Err(DgpError::invalid("matrix is not symmetric"));
    }
    let n = a.nrows();
    let mut jitter = base_jitter;
    loop {
        let mut shifted = a.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(shifted) {
            let lower = chol.unpack();
            if lower.diagonal().iter().all(|&d| d > 0.0 && d.is_finite()) {
                return Ok(CholFactor {
                    lower,
                    jitter_used: jitter,
                });
            }
        }
        let next = if jitter == 0.0 {
            1e-10 * diagonal_scale(a)
        } else {
            jitter * 10.0
        };
        if next > ceiling {
            return Err(DgpError::numerical(
                format!("cholesky of {n}x{n} matrix failed"),
                jitter,
            ));
        }
        jitter = next;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMode {
    /// L X = rhs
    Forward,
    /// Lᵀ X = rhs
    Backward,
    /// (L Lᵀ) X = rhs
    FullInverseApply,
}

pub fn tri_solve(factor: &CholFactor, rhs: &DMatrix<f64>, mode: SolveMode) -> Result<DMatrix<f64>> {
    if rhs.nrows() != factor.dim() {
        return Err(DgpError::invalid(format!(
            "rhs has {} rows, factor is {}x{}",
            rhs.nrows(),
            factor.dim(),
            factor.dim()
        )));
    }
    let l = &factor.lower;
    let out = match mode {
        SolveMode::Forward => solve_lower(l, rhs),
        SolveMode::Backward => solve_lower_transpose(l, rhs),
        SolveMode::FullInverseApply => solve_lower_transpose(l, &solve_lower(l, rhs)),
    };
    Ok(out)
}

pub(crate) fn solve_lower(l: &DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    l.solve_lower_triangular(rhs)
        .expect("cholesky factor has a nonzero diagonal")
}

pub(crate) fn solve_lower_transpose(l: &DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    l.tr_solve_lower_triangular(rhs)
        .expect("cholesky factor has a nonzero diagonal")
}
