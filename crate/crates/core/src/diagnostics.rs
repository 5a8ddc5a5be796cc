//! Posterior diagnostics: kurtosis-based Gaussianity tests over sampled
//! inducing outputs, and the two-mode coverage of a sample set.

use std::fmt::Write as _;

use nalgebra::DVector;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{DgpError, Result};
use crate::sghmc::SampleWindow;

/// Smallest sample for which [`kurtosis_pvalue`] is defined.
pub const MIN_PVALUE_SAMPLES: usize = 20;
pub const DEFAULT_ALPHA: f64 = 1e-5;
pub const DEFAULT_TESTED_COORDS: usize = 100;

/// Population kurtosis `μ₄ / σ⁴`.
pub fn kurtosis(samples: &[f64]) -> Result<f64> {
    if samples.len() < 4 {
        return Err(DgpError::invalid("kurtosis needs at least 4 samples"));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let (mut m2, mut m4) = (0.0, 0.0);
    for x in samples {
        let d = (x - mean) * (x - mean);
        m2 += d;
        m4 += d * d;
    }
    m2 /= n;
    m4 /= n;
    // rounding in the mean leaves tiny residuals for constant input
    if !(m2 > (4.0 * f64::EPSILON * mean.abs()).powi(2)) {
        return Err(DgpError::DegenerateInput("samples have zero variance".into()));
    }
    Ok(m4 / (m2 * m2))
}

/// Two-sided p-value of the Anscombe-Glynn kurtosis test: the sample
/// kurtosis is standardized with its exact null mean and variance, then
/// mapped to an approximately standard normal score by a cube-root
/// transformation.
pub fn kurtosis_pvalue(samples: &[f64]) -> Result<f64> {
    Ok(kurtosis_test(samples)?.1)
}

/// (z-score, two-sided p-value).
pub fn kurtosis_test(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.len() < MIN_PVALUE_SAMPLES {
        return Err(DgpError::invalid(format!(
            "kurtosis test needs at least {MIN_PVALUE_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    let b2 = kurtosis(samples)?;
    let n = samples.len() as f64;
    let expected = 3.0 * (n - 1.0) / (n + 1.0);
    let var_b2 = 24.0 * n * (n - 2.0) * (n - 3.0) / ((n + 1.0) * (n + 1.0) * (n + 3.0) * (n + 5.0));
    let x = (b2 - expected) / var_b2.sqrt();
    let sqrt_beta1 = 6.0 * (n * n - 5.0 * n + 2.0) / ((n + 7.0) * (n + 9.0))
        * (6.0 * (n + 3.0) * (n + 5.0) / (n * (n - 2.0) * (n - 3.0))).sqrt();
    let a = 6.0 + 8.0 / sqrt_beta1 * (2.0 / sqrt_beta1 + (1.0 + 4.0 / (sqrt_beta1 * sqrt_beta1)).sqrt());
    let term1 = 1.0 - 2.0 / (9.0 * a);
    let denom = 1.0 + x * (2.0 / (a - 4.0)).sqrt();
    let term2 = if denom == 0.0 {
        0.0
    } else {
        denom.signum() * ((1.0 - 2.0 / a) / denom.abs()).cbrt()
    };
    let z = (term1 - term2) / (2.0 / (9.0 * a)).sqrt();
    let p = erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0);
    Ok((z, p))
}

/// One tested latent coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordinateTest {
    pub coordinate: usize,
    pub samples: usize,
    pub kurtosis: f64,
    pub p_value: f64,
    pub rejected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianityReport {
    pub label: String,
    pub alpha: f64,
    pub corrected_alpha: f64,
    pub tests: Vec<CoordinateTest>,
}

impl GaussianityReport {
    pub fn rejections(&self) -> usize {
        self.tests.iter().filter(|t| t.rejected).count()
    }

    /// Tab-separated table with a header row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("coordinate\tkurtosis\tp_value\trejected\n");
        for t in &self.tests {
            let _ = writeln!(out, "{}\t{:.6}\t{:.6e}\t{}", t.coordinate, t.kurtosis, t.p_value, t.rejected);
        }
        out
    }
}

/// Tests `n_coords` coordinates chosen uniformly without replacement,
/// rejecting at the Bonferroni-corrected level `alpha / n_coords`.
pub fn gaussianity_report<R: Rng + ?Sized>(
    window: &SampleWindow,
    n_coords: usize,
    alpha: f64,
    label: &str,
    rng: &mut R,
) -> Result<GaussianityReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(DgpError::invalid("alpha must lie in (0, 1)"));
    }
    let corrected_alpha = if n_coords == 0 { alpha } else { alpha / n_coords as f64 };
    let mut report = GaussianityReport {
        label: label.to_string(),
        alpha,
        corrected_alpha,
        tests: Vec::with_capacity(n_coords),
    };
    if n_coords == 0 {
        return Ok(report);
    }
    if window.len() < MIN_PVALUE_SAMPLES {
        return Err(DgpError::invalid(format!(
            "window holds {} samples, the test needs {MIN_PVALUE_SAMPLES}",
            window.len()
        )));
    }
    let dim = window.get(0).map(|u| u.len()).unwrap_or(0);
    if n_coords > dim {
        return Err(DgpError::invalid(format!(
            "cannot test {n_coords} coordinates of a {dim}-dimensional latent"
        )));
    }
    let mut coords = index::sample(rng, dim, n_coords).into_vec();
    coords.sort_unstable();
    let mut trace = vec![0.0; window.len()];
    for c in coords {
        for (t, u) in trace.iter_mut().zip(window.iter()) {
            *t = u.values[c];
        }
        let (kurtosis, p_value) = match kurtosis(&trace) {
            Ok(k) => (k, kurtosis_pvalue(&trace)?),
            // a frozen coordinate carries no evidence either way
            Err(DgpError::DegenerateInput(_)) => (f64::NAN, 1.0),
            Err(e) => return Err(e),
        };
        report.tests.push(CoordinateTest {
            coordinate: c,
            samples: trace.len(),
            kurtosis,
            p_value,
            rejected: p_value < corrected_alpha,
        });
    }
    Ok(report)
}

/// Fractions of samples whose projection onto `direction` is strictly
/// positive and strictly negative.
pub fn bimodality_coverage(window: &SampleWindow, direction: &DVector<f64>) -> Result<(f64, f64)> {
    if window.is_empty() {
        return Err(DgpError::InvalidState("empty sample window".into()));
    }
    if direction.iter().all(|&d| d == 0.0) {
        return Err(DgpError::invalid("reference direction is zero"));
    }
    let (mut pos, mut neg) = (0usize, 0usize);
    for u in window.iter() {
        if u.len() != direction.len() {
            return Err(DgpError::invalid("reference direction does not match the latent length"));
        }
        let p = u.values.dot(direction);
        if p > 0.0 {
            pos += 1;
        } else if p < 0.0 {
            neg += 1;
        }
    }
    let n = window.len() as f64;
    Ok((pos as f64 / n, neg as f64 / n))
}
