//! A single sparse GP layer: conditional moments of the layer outputs given
//! the inducing outputs, sampling of those outputs, and the deterministic
//! mean function used on hidden layers.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{DgpError, Result};
use crate::kernel::{chol_psd, KernelParams, DEFAULT_RELATIVE_JITTER};

/// Conditional variances below `-NEGATIVE_VARIANCE_TOLERANCE * signal_variance`
/// are treated as a numerical failure; anything above is clamped to zero.
pub const NEGATIVE_VARIANCE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeanFnKind {
    Zero,
    Identity,
    Projection,
}

/// Deterministic mean function `x -> x W` added to a layer's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanFnSpec {
    pub kind: MeanFnKind,
    /// D_in x D_out, present only for `Projection`.
    pub projection: Option<DMatrix<f64>>,
}

impl MeanFnSpec {
    pub fn zero() -> Self {
        MeanFnSpec {
            kind: MeanFnKind::Zero,
            projection: None,
        }
    }

    pub fn identity() -> Self {
        MeanFnSpec {
            kind: MeanFnKind::Identity,
            projection: None,
        }
    }

    pub fn projection(w: DMatrix<f64>) -> Result<Self> {
        let gram = if w.ncols() <= w.nrows() {
            w.transpose() * &w
        } else {
            &w * w.transpose()
        };
        let k = gram.nrows();
        if (gram - DMatrix::<f64>::identity(k, k)).amax() > 1e-8 {
            return Err(DgpError::invalid("projection matrix is not orthonormal"));
        }
        Ok(MeanFnSpec {
            kind: MeanFnKind::Projection,
            projection: Some(w),
        })
    }

    /// `[I 0]`, used when a layer widens its input.
    pub fn padded_identity(d_in: usize, d_out: usize) -> Self {
        MeanFnSpec {
            kind: MeanFnKind::Projection,
            projection: Some(DMatrix::from_fn(d_in, d_out, |i, j| {
                if i == j {
                    1.0
                } else {
                    0.0
                }
            })),
        }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        match self.kind {
            MeanFnKind::Zero => None,
            MeanFnKind::Identity => Some(x.clone()),
            MeanFnKind::Projection => Some(x * self.projection.as_ref().expect("projection matrix")),
        }
    }

    pub(crate) fn apply_tape<'t>(&self, x: Var<'t>) -> Option<Var<'t>> {
        match self.kind {
            MeanFnKind::Zero => None,
            MeanFnKind::Identity => Some(x),
            MeanFnKind::Projection => {
                let w = x.tape().constant(self.projection.clone().expect("projection matrix"));
                Some(x.matmul(w))
            }
        }
    }

    pub fn check_dims(&self, d_in: usize, d_out: usize) -> Result<()> {
        match self.kind {
            MeanFnKind::Zero => Ok(()),
            MeanFnKind::Identity if d_in == d_out => Ok(()),
            MeanFnKind::Identity => Err(DgpError::invalid(format!(
                "identity mean function needs equal dimensions, got {d_in} -> {d_out}"
            ))),
            MeanFnKind::Projection => {
                let w = self.projection.as_ref().ok_or_else(|| DgpError::invalid("missing projection"))?;
                if w.shape() != (d_in, d_out) {
                    return Err(DgpError::invalid(format!(
                        "projection is {}x{}, layer is {d_in} -> {d_out}",
                        w.nrows(),
                        w.ncols()
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Identity when `d_in == d_out`, otherwise the top `d_out` right singular
/// vectors of the centered training inputs.
pub fn make_mean_fn(d_in: usize, d_out: usize, training_inputs: &DMatrix<f64>) -> Result<MeanFnSpec> {
    if d_in == d_out {
        return Ok(MeanFnSpec::identity());
    }
    if d_out > d_in {
        return Err(DgpError::invalid(format!(
            "cannot project {d_in} inputs onto {d_out} outputs"
        )));
    }
    if training_inputs.nrows() == 0 {
        return Err(DgpError::invalid("projection needs training inputs"));
    }
    if training_inputs.ncols() != d_in {
        return Err(DgpError::invalid("training inputs do not match input dimension"));
    }
    let mut centered = training_inputs.clone();
    for mut col in centered.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    // Right singular vectors are the eigenvectors of XᵀX; this avoids the
    // thin-SVD shape restrictions when N < D.
    let eig = nalgebra::SymmetricEigen::new(centered.transpose() * &centered);
    let mut order: Vec<usize> = (0..d_in).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let w = DMatrix::from_fn(d_in, d_out, |i, j| eig.eigenvectors[(i, order[j])]);
    MeanFnSpec::projection(w)
}

/// One GP layer with its inducing inputs and outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerState {
    /// M x D_in inducing inputs.
    pub z: DMatrix<f64>,
    /// M x D_out inducing outputs.
    pub u: DMatrix<f64>,
    pub kernel: KernelParams,
    pub mean_fn: MeanFnSpec,
}

impl LayerState {
    pub fn new(z: DMatrix<f64>, u: DMatrix<f64>, kernel: KernelParams, mean_fn: MeanFnSpec) -> Result<Self> {
        let layer = LayerState { z, u, kernel, mean_fn };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        if self.u.nrows() != self.z.nrows() {
            return Err(DgpError::invalid(format!(
                "{} inducing outputs for {} inducing inputs",
                self.u.nrows(),
                self.z.nrows()
            )));
        }
        if self.kernel.input_dim() != self.z.ncols() {
            return Err(DgpError::invalid(format!(
                "kernel dimension {} does not match inducing input dimension {}",
                self.kernel.input_dim(),
                self.z.ncols()
            )));
        }
        self.mean_fn.check_dims(self.input_dim(), self.output_dim())
    }

    pub fn num_inducing(&self) -> usize {
        self.z.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.z.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.u.ncols()
    }
}

/// Per-point marginal moments of a layer's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMoments {
    /// N x D_out
    pub mean: DMatrix<f64>,
    /// N x D_out; identical across columns.
    pub var_diag: DMatrix<f64>,
}

/// Kernel hyperparameters and inducing inputs of one layer on a tape.
#[derive(Clone, Copy)]
pub(crate) struct KernelVars<'t> {
    pub log_ls: Var<'t>,
    pub log_var: Var<'t>,
}

impl<'t> KernelVars<'t> {
    pub fn new(tape: &'t Tape, params: &KernelParams, grad: bool) -> Self {
        let ls = &params.log_lengthscales;
        KernelVars {
            log_ls: tape.input(DMatrix::from_column_slice(ls.len(), 1, ls.as_slice()), grad),
            log_var: tape.input(DMatrix::from_element(1, 1, params.log_signal_variance), grad),
        }
    }

    pub fn gram(&self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        a.gram(b, self.log_ls, self.log_var)
    }

    /// K(z, z) plus the default relative jitter, escalated until the matrix
    /// factors. The jitter is kept proportional to the signal variance on
    /// the tape, so it is differentiated along with it.
    pub fn jittered_gram(&self, z: Var<'t>) -> Result<Var<'t>> {
        let kzz = self.gram(z, z)?;
        let signal = self.log_var.scalar().exp();
        let jitter = {
            let k = kzz.value();
            let sym = (&*k + k.transpose()) * 0.5;
            chol_psd(&sym, DEFAULT_RELATIVE_JITTER * signal)?.jitter_used
        };
        let m = kzz.shape().0;
        let eye = z.tape().constant(DMatrix::identity(m, m));
        Ok(kzz.add(eye.mul_scalar(self.log_var.exp().scale(jitter / signal))))
    }

    /// Lower Cholesky factor of [`Self::jittered_gram`].
    pub fn chol(&self, z: Var<'t>) -> Result<Var<'t>> {
        Ok(self.jittered_gram(z)?.cholesky(0.0)?.0)
    }

    /// N x 1 column of prior variances k(x, x).
    pub fn prior_diag(&self, n: usize) -> Var<'t> {
        self.log_var.exp().fill(n, 1)
    }
}

/// Checks the variance column against the round-off tolerance, then clamps it.
pub(crate) fn clamp_variance<'t>(var: Var<'t>, signal_variance: f64) -> Result<Var<'t>> {
    let min = var.value().min();
    if min < -NEGATIVE_VARIANCE_TOLERANCE * signal_variance.max(1.0) {
        return Err(DgpError::numerical(
            format!("conditional variance {min:e} is negative beyond round-off"),
            0.0,
        ));
    }
    Ok(var.clamp_min0())
}

/// Moments of p(f | u) on a tape: mean N x D_out, variance N x 1.
pub(crate) fn conditional_tape<'t>(
    x: Var<'t>,
    z: Var<'t>,
    kv: &KernelVars<'t>,
    chol: Var<'t>,
    u: Var<'t>,
    mean_fn: &MeanFnSpec,
) -> Result<(Var<'t>, Var<'t>)> {
    let n = x.shape().0;
    let kzx = kv.gram(z, x)?;
    let a = chol.solve_lower(kzx);
    let w = chol.solve_lower(u);
    let mut mean = a.t().matmul(w);
    if let Some(m) = mean_fn.apply_tape(x) {
        mean = mean.add(m);
    }
    let var = kv.prior_diag(n).sub(a.col_sum_sq());
    let var = clamp_variance(var, kv.log_var.scalar().exp())?;
    Ok((mean, var))
}

/// `mean + sqrt(var) * eps` with `var` an N x 1 column shared across outputs.
pub(crate) fn sample_tape<'t>(mean: Var<'t>, var: Var<'t>, eps: &DMatrix<f64>) -> Var<'t> {
    let tape = mean.tape();
    let d = mean.shape().1;
    let sd = var.sqrt().broadcast_cols(d);
    mean.add(sd.mul(tape.constant(eps.clone())))
}

/// Standard-normal matrix drawn in column-major order.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Conditional moments of the layer outputs at `x_in` given `layer.u`.
pub fn conditional(x_in: &DMatrix<f64>, layer: &LayerState) -> Result<ConditionalMoments> {
    if x_in.ncols() != layer.input_dim() {
        return Err(DgpError::invalid(format!(
            "inputs have {} columns, layer expects {}",
            x_in.ncols(),
            layer.input_dim()
        )));
    }
    let tape = Tape::new();
    let kv = KernelVars::new(&tape, &layer.kernel, false);
    let z = tape.constant(layer.z.clone());
    let chol = kv.chol(z)?;
    let x = tape.constant(x_in.clone());
    let u = tape.constant(layer.u.clone());
    let (mean, var) = conditional_tape(x, z, &kv, chol, u, &layer.mean_fn)?;
    let mean = mean.value().clone();
    let var_diag = var.broadcast_cols(layer.output_dim()).value().clone();
    Ok(ConditionalMoments { mean, var_diag })
}

/// Draws `mean + sqrt(var) * eps`; deterministic for a given generator state.
pub fn sample_layer<R: Rng + ?Sized>(moments: &ConditionalMoments, rng: &mut R) -> DMatrix<f64> {
    let eps = standard_normal(rng, moments.mean.nrows(), moments.mean.ncols());
    let mut out = moments.mean.clone();
    for i in 0..out.len() {
        out[i] += moments.var_diag[i].max(0.0).sqrt() * eps[i];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_d_layer(z: &[f64], u: &[f64]) -> LayerState {
        LayerState::new(
            DMatrix::from_column_slice(z.len(), 1, z),
            DMatrix::from_column_slice(u.len(), 1, u),
            KernelParams::isotropic(1),
            MeanFnSpec::zero(),
        )
        .unwrap()
    }

    #[test]
    fn interpolates_at_inducing_inputs() {
        let layer = one_d_layer(&[-1.0, 0.0, 1.5], &[0.3, -0.2, 1.1]);
        let m = conditional(&layer.z, &layer).unwrap();
        assert!((&m.mean - &layer.u).amax() < 1e-5);
        assert!(m.var_diag.max() < 1e-5);
    }

    #[test]
    fn single_inducing_point_by_hand() {
        let layer = one_d_layer(&[0.0], &[1.0]);
        let m = conditional(&DMatrix::from_element(1, 1, 1.0), &layer).unwrap();
        // jitter of 1e-6 perturbs the result at the 1e-6 level
        assert_abs_diff_eq!(m.mean[0], (-0.5f64).exp(), epsilon = 2e-6);
        assert_abs_diff_eq!(m.var_diag[0], 1.0 - (-1.0f64).exp(), epsilon = 2e-6);
        assert_abs_diff_eq!(m.mean[0], 0.60653, epsilon = 1e-5);
        assert_abs_diff_eq!(m.var_diag[0], 0.63212, epsilon = 1e-5);
    }

    #[test]
    fn far_field_reverts_to_prior() {
        let layer = one_d_layer(&[-1.0, 0.0, 1.0], &[2.0, -1.0, 3.0]);
        let m = conditional(&DMatrix::from_element(1, 1, 25.0), &layer).unwrap();
        assert!(m.mean[0].abs() < 1e-6);
        assert!((m.var_diag[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn variance_is_replicated_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = standard_normal(&mut rng, 6, 2);
        let u = standard_normal(&mut rng, 6, 3);
        let kernel = KernelParams::new(&[0.7, 1.3], 1.7).unwrap();
        let layer = LayerState::new(z, u, kernel, MeanFnSpec::zero()).unwrap();
        let x = standard_normal(&mut rng, 20, 2) * 2.0;
        let m = conditional(&x, &layer).unwrap();
        for i in 0..20 {
            assert_eq!(m.var_diag[(i, 0)], m.var_diag[(i, 2)]);
            assert!(m.var_diag[(i, 0)] <= 1.7 + 1e-8);
            assert!(m.var_diag[(i, 0)] >= 0.0);
        }
    }

    #[test]
    fn mean_is_linear_in_inducing_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z = standard_normal(&mut rng, 5, 2);
        let u1 = standard_normal(&mut rng, 5, 2);
        let u2 = standard_normal(&mut rng, 5, 2);
        let x = standard_normal(&mut rng, 7, 2);
        let kernel = KernelParams::isotropic(2);
        let at = |u: DMatrix<f64>| {
            let layer = LayerState::new(z.clone(), u, kernel.clone(), MeanFnSpec::identity()).unwrap();
            conditional(&x, &layer).unwrap().mean
        };
        let (a, b) = (0.7, -1.9);
        let combined = at(&u1 * a + &u2 * b);
        // the identity offset x enters once, not a + b times
        let expected = (at(u1) - &x) * a + (at(u2) - &x) * b + &x;
        assert!((combined - expected).amax() < 1e-8);
    }

    #[test]
    fn sampling_is_deterministic_and_degenerate_without_variance() {
        let moments = ConditionalMoments {
            mean: DMatrix::from_element(3, 2, 0.5),
            var_diag: DMatrix::zeros(3, 2),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_layer(&moments, &mut rng), moments.mean);
        let noisy = ConditionalMoments {
            mean: moments.mean.clone(),
            var_diag: DMatrix::from_element(3, 2, 2.0),
        };
        let a = sample_layer(&noisy, &mut ChaCha8Rng::seed_from_u64(4));
        let b = sample_layer(&noisy, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
    }

    #[test]
    fn sample_moments_match() {
        let moments = ConditionalMoments {
            mean: DMatrix::from_element(1, 1, 1.5),
            var_diag: DMatrix::from_element(1, 1, 0.49),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_layer(&moments, &mut rng)[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se_mean = (0.49 / n as f64).sqrt();
        let se_var = 0.49 * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - 1.5).abs() < 3.0 * se_mean);
        assert!((var - 0.49).abs() < 3.0 * se_var);
    }

    #[test]
    fn mean_function_construction() {
        let x = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 0.0]);
        let id = make_mean_fn(3, 3, &x).unwrap();
        assert_eq!(id.kind, MeanFnKind::Identity);
        assert_eq!(id.apply(&x).unwrap(), x);

        let on_axis = DMatrix::from_row_slice(4, 2, &[-2.0, 0.0, 1.0, 0.0, 3.0, 0.0, 0.5, 0.0]);
        let proj = make_mean_fn(2, 1, &on_axis).unwrap();
        let w = proj.projection.unwrap();
        assert_abs_diff_eq!(w[(0, 0)].abs(), 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(w[(1, 0)], 0.0, epsilon = 1e-10);

        assert!(MeanFnSpec::zero().apply(&x).is_none());
        assert!(matches!(make_mean_fn(1, 2, &on_axis), Err(DgpError::InvalidArgument(_))));
    }

    #[test]
    fn layer_shape_checks() {
        let bad = LayerState::new(
            DMatrix::zeros(3, 1),
            DMatrix::zeros(2, 1),
            KernelParams::isotropic(1),
            MeanFnSpec::zero(),
        );
        assert!(bad.is_err());
        let bad_identity = LayerState::new(
            DMatrix::zeros(3, 2),
            DMatrix::zeros(3, 1),
            KernelParams::isotropic(2),
            MeanFnSpec::identity(),
        );
        assert!(bad_identity.is_err());
    }
}
