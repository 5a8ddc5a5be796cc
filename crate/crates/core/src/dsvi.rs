//! Doubly stochastic variational inference for deep GPs.
//!
//! Two families of q(u) per layer:
//!
//! * coupled: `q(u) = N(m, S)` at the layer's inducing inputs `Z`, with one
//!   `S = L_S L_Sᵀ` shared by all output columns;
//! * decoupled: separate inducing sets for the mean (`Z_a`) and the
//!   covariance (`Z_b`), with `Σ̃ = K_xx - K_xb (B⁻¹ + K_bb)⁻¹ K_bx`.
//!
//! The ELBO propagates one sample through the hidden layers and takes the
//! Gaussian expectation of the likelihood at the last layer in closed form.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{DgpError, Result};
use crate::kernel::{chol_psd, default_jitter, gram, KernelParams};
use crate::layer::{clamp_variance, sample_tape, standard_normal, ConditionalMoments, KernelVars, MeanFnSpec};
use crate::mcem::{adaptive_step, OptimizerState};
use crate::model::{gaussian_loglik_tape, Data, DGPModel, PredictiveMixture};

/// Coupled q(u) of one layer. Inducing inputs are the model layer's `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledLayer {
    /// M x D_out
    pub m: DMatrix<f64>,
    /// M x M lower triangular with positive diagonal.
    pub s_chol: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledVarParams {
    pub layers: Vec<CoupledLayer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeanParameterization {
    /// `μ = K_xa a`
    Cb,
    /// `μ = K_xa K_aa⁻¹ m`
    Gp,
    /// `μ = K_xa L_a⁻ᵀ m'` with `L_a` the Cholesky factor of `K_aa`.
    GpCent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoupledLayer {
    /// M_a x D_in
    pub z_a: DMatrix<f64>,
    /// M_b x D_in
    pub z_b: DMatrix<f64>,
    /// M_a x D_out, read as `a`, `m` or `m'` depending on the parameterization.
    pub mean_param: DMatrix<f64>,
    /// M_b x M_b lower triangular with positive diagonal.
    pub b_chol: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoupledVarParams {
    pub layers: Vec<DecoupledLayer>,
    pub kind: MeanParameterization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum VarParams {
    Coupled(CoupledVarParams),
    Decoupled(DecoupledVarParams),
}

/// Relative scale of the initial coupled covariance, `S = c K_ZZ`.
pub const INITIAL_S_SCALE: f64 = 1e-5;

impl CoupledVarParams {
    /// `m = 0`, `S = 1e-5 K_ZZ` for every layer.
    pub fn init(model: &DGPModel) -> Result<Self> {
        let layers = model
            .layers
            .iter()
            .map(|l| {
                let k = gram(&l.z, &l.z, &l.kernel)?;
                let chol = chol_psd(&k, default_jitter(&k))?;
                Ok(CoupledLayer {
                    m: DMatrix::zeros(l.num_inducing(), l.output_dim()),
                    s_chol: chol.lower * INITIAL_S_SCALE.sqrt(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CoupledVarParams { layers })
    }
}

impl DecoupledVarParams {
    /// Inducing sets are random subsets of the layer inputs (the model's
    /// inducing inputs for deeper layers pass through unchanged); mean
    /// parameters start at zero and `B = I`.
    pub fn init<R: Rng + ?Sized>(
        model: &DGPModel,
        x: &DMatrix<f64>,
        m_a: usize,
        m_b: usize,
        kind: MeanParameterization,
        rng: &mut R,
    ) -> Result<Self> {
        if m_a == 0 || m_b == 0 {
            return Err(DgpError::invalid("decoupled inducing sets must be nonempty"));
        }
        let mut inputs = x.clone();
        let mut layers = Vec::with_capacity(model.num_layers());
        for layer in &model.layers {
            let pick = |k: usize, rng: &mut R| -> DMatrix<f64> {
                let n = inputs.nrows();
                if k <= n {
                    inputs.select_rows(&index::sample(rng, n, k).into_vec())
                } else {
                    let rows: Vec<usize> = (0..k).map(|i| i % n).collect();
                    inputs.select_rows(&rows) + standard_normal(rng, k, inputs.ncols()) * 1e-2
                }
            };
            let z_a = pick(m_a, rng);
            let z_b = pick(m_b, rng);
            layers.push(DecoupledLayer {
                z_a,
                z_b,
                mean_param: DMatrix::zeros(m_a, layer.output_dim()),
                b_chol: DMatrix::identity(m_b, m_b),
            });
            let d_out = layer.output_dim();
            inputs = layer
                .mean_fn
                .apply(&inputs)
                .unwrap_or_else(|| DMatrix::zeros(inputs.nrows(), d_out));
        }
        Ok(DecoupledVarParams { layers, kind })
    }
}

impl VarParams {
    pub fn num_layers(&self) -> usize {
        match self {
            VarParams::Coupled(c) => c.layers.len(),
            VarParams::Decoupled(d) => d.layers.len(),
        }
    }

    /// Unconstrained flat vector: triangular factors are stored with their
    /// diagonal on the log scale.
    pub fn pack(&self) -> DVector<f64> {
        let mut v = Vec::new();
        match self {
            VarParams::Coupled(c) => {
                for l in &c.layers {
                    v.extend(l.m.iter());
                    v.extend(log_diag_raw(&l.s_chol).iter());
                }
            }
            VarParams::Decoupled(d) => {
                for l in &d.layers {
                    v.extend(l.z_a.iter());
                    v.extend(l.z_b.iter());
                    v.extend(l.mean_param.iter());
                    v.extend(log_diag_raw(&l.b_chol).iter());
                }
            }
        }
        DVector::from_vec(v)
    }

    pub fn unpack(&mut self, values: &DVector<f64>) -> Result<()> {
        if values.len() != self.pack().len() {
            return Err(DgpError::invalid("variational parameter vector has the wrong length"));
        }
        let mut offset = 0;
        let mut take = |target: &mut DMatrix<f64>| {
            let n = target.len();
            target.copy_from_slice(&values.as_slice()[offset..offset + n]);
            offset += n;
        };
        match self {
            VarParams::Coupled(c) => {
                for l in &mut c.layers {
                    take(&mut l.m);
                    take(&mut l.s_chol);
                    l.s_chol = exp_diag_tril(&l.s_chol);
                }
            }
            VarParams::Decoupled(d) => {
                for l in &mut d.layers {
                    take(&mut l.z_a);
                    take(&mut l.z_b);
                    take(&mut l.mean_param);
                    take(&mut l.b_chol);
                    l.b_chol = exp_diag_tril(&l.b_chol);
                }
            }
        }
        Ok(())
    }

    pub fn check_against(&self, model: &DGPModel) -> Result<()> {
        if self.num_layers() != model.num_layers() {
            return Err(DgpError::invalid("variational parameters and model differ in depth"));
        }
        for (l, layer) in model.layers.iter().enumerate() {
            let (m_rows, m_cols, chol, d_in) = match self {
                VarParams::Coupled(c) => {
                    let v = &c.layers[l];
                    (v.m.nrows(), v.m.ncols(), v.s_chol.shape(), layer.input_dim())
                }
                VarParams::Decoupled(d) => {
                    let v = &d.layers[l];
                    if v.z_a.ncols() != layer.input_dim()
                        || v.z_b.ncols() != layer.input_dim()
                        || v.z_a.nrows() != v.mean_param.nrows()
                    {
                        return Err(DgpError::invalid(format!("layer {l}: decoupled inducing sets do not conform")));
                    }
                    (v.z_a.nrows(), v.mean_param.ncols(), v.b_chol.shape(), layer.input_dim())
                }
            };
            let want_rows = match self {
                VarParams::Coupled(_) => layer.num_inducing(),
                VarParams::Decoupled(_) => m_rows,
            };
            let want_chol = match self {
                VarParams::Coupled(_) => (want_rows, want_rows),
                VarParams::Decoupled(d) => (d.layers[l].z_b.nrows(), d.layers[l].z_b.nrows()),
            };
            if m_rows != want_rows || m_cols != layer.output_dim() || chol != want_chol || d_in == 0 {
                return Err(DgpError::invalid(format!("layer {l}: variational shapes do not conform")));
            }
        }
        Ok(())
    }
}

fn log_diag_raw(l: &DMatrix<f64>) -> DMatrix<f64> {
    let mut raw = l.lower_triangle();
    for i in 0..raw.nrows() {
        raw[(i, i)] = raw[(i, i)].ln();
    }
    raw
}

fn exp_diag_tril(raw: &DMatrix<f64>) -> DMatrix<f64> {
    let mut l = raw.lower_triangle();
    for i in 0..l.nrows() {
        l[(i, i)] = l[(i, i)].exp();
    }
    l
}

/// Tape nodes of one coupled layer.
struct CoupledNodes<'t> {
    z: Var<'t>,
    kv: KernelVars<'t>,
    chol_k: Var<'t>,
    m: Var<'t>,
    s_raw: Var<'t>,
    s_chol: Var<'t>,
}

/// Tape nodes of one decoupled layer.
struct DecoupledNodes<'t> {
    kv: KernelVars<'t>,
    z_a: Var<'t>,
    z_b: Var<'t>,
    mean_param: Var<'t>,
    b_raw: Var<'t>,
    b_chol: Var<'t>,
    /// Factor of K_aa, needed by the GP and GPcent means.
    chol_a: Option<Var<'t>>,
    chol_c: Var<'t>,
}

/// Moments of q(f) = ∫ p(f|u) q(u) du for the coupled family.
fn coupled_marginal_tape<'t>(x: Var<'t>, n: &CoupledNodes<'t>, mean_fn: &MeanFnSpec) -> Result<(Var<'t>, Var<'t>)> {
    let rows = x.shape().0;
    let a = n.chol_k.solve_lower(n.kv.gram(n.z, x)?);
    let mut mean = a.t().matmul(n.chol_k.solve_lower(n.m));
    if let Some(mf) = mean_fn.apply_tape(x) {
        mean = mean.add(mf);
    }
    let b = n.chol_k.solve_lower_t(a);
    let var = n
        .kv
        .prior_diag(rows)
        .sub(a.col_sum_sq())
        .add(n.s_chol.t().matmul(b).col_sum_sq());
    let var = clamp_variance(var, n.kv.log_var.scalar().exp())?;
    Ok((mean, var))
}

/// Σ over output columns of KL(N(m, S) ‖ N(0, K)).
fn kl_coupled_tape<'t>(chol_k: Var<'t>, m: Var<'t>, s_chol: Var<'t>) -> Var<'t> {
    let (rows, d) = m.shape();
    let d = d as f64;
    let trace = chol_k.solve_lower(s_chol).sum_sq().scale(d);
    let quad = chol_k.solve_lower(m).sum_sq();
    let log_dets = chol_k.log_diag_sum().sub(s_chol.log_diag_sum()).scale(2.0 * d);
    trace
        .add(quad)
        .add(log_dets)
        .add(m.tape().scalar_constant(-(rows as f64) * d))
        .scale(0.5)
}

fn decoupled_mean_tape<'t>(x: Var<'t>, n: &DecoupledNodes<'t>, kind: MeanParameterization) -> Result<Var<'t>> {
    let kax = n.kv.gram(n.z_a, x)?;
    Ok(match kind {
        MeanParameterization::Cb => kax.t().matmul(n.mean_param),
        MeanParameterization::Gp => {
            let chol = n.chol_a.expect("factor of K_aa");
            chol.solve_lower(kax).t().matmul(chol.solve_lower(n.mean_param))
        }
        MeanParameterization::GpCent => {
            let chol = n.chol_a.expect("factor of K_aa");
            chol.solve_lower(kax).t().matmul(n.mean_param)
        }
    })
}

fn decoupled_marginal_tape<'t>(
    x: Var<'t>,
    n: &DecoupledNodes<'t>,
    kind: MeanParameterization,
    mean_fn: &MeanFnSpec,
) -> Result<(Var<'t>, Var<'t>)> {
    let rows = x.shape().0;
    let mut mean = decoupled_mean_tape(x, n, kind)?;
    if let Some(mf) = mean_fn.apply_tape(x) {
        mean = mean.add(mf);
    }
    let w = n.chol_c.solve_lower(n.b_chol.t().matmul(n.kv.gram(n.z_b, x)?));
    let var = n.kv.prior_diag(rows).sub(w.col_sum_sq());
    let var = clamp_variance(var, n.kv.log_var.scalar().exp())?;
    Ok((mean, var))
}

/// ½ Σ aᵀ K_aa a + D (½ log|I + K_bb B| - ½ tr(K_bb (B⁻¹ + K_bb)⁻¹)).
/// Zero at `a = 0`, `B = 0`.
fn kl_decoupled_tape<'t>(n: &DecoupledNodes<'t>, kind: MeanParameterization) -> Result<Var<'t>> {
    let tape = n.mean_param.tape();
    let quad = match kind {
        MeanParameterization::Cb => {
            let kaa = n.kv.jittered_gram(n.z_a)?;
            n.mean_param.mul(kaa.matmul(n.mean_param)).sum()
        }
        MeanParameterization::Gp => n.chol_a.expect("factor of K_aa").solve_lower(n.mean_param).sum_sq(),
        MeanParameterization::GpCent => n.mean_param.sum_sq(),
    };
    let (m_b, d) = (n.b_chol.shape().0, n.mean_param.shape().1 as f64);
    let eye = tape.constant(DMatrix::identity(m_b, m_b));
    let inv_c_frob = n.chol_c.solve_lower(eye).sum_sq();
    let cov = n
        .chol_c
        .log_diag_sum()
        .sub(inv_c_frob.neg().add(tape.scalar_constant(m_b as f64)).scale(0.5))
        .scale(d);
    Ok(quad.scale(0.5).add(cov))
}

fn coupled_nodes<'t>(
    tape: &'t Tape,
    kernel: &KernelParams,
    z: &DMatrix<f64>,
    layer: &CoupledLayer,
    grad: bool,
) -> Result<CoupledNodes<'t>> {
    let kv = KernelVars::new(tape, kernel, grad);
    let z = tape.input(z.clone(), grad);
    let chol_k = kv.chol(z)?;
    let m = tape.input(layer.m.clone(), grad);
    let s_raw = tape.input(log_diag_raw(&layer.s_chol), grad);
    Ok(CoupledNodes {
        z,
        kv,
        chol_k,
        m,
        s_raw,
        s_chol: s_raw.tril_exp_diag(),
    })
}

fn decoupled_nodes<'t>(
    tape: &'t Tape,
    kernel: &KernelParams,
    layer: &DecoupledLayer,
    kind: MeanParameterization,
    grad: bool,
) -> Result<DecoupledNodes<'t>> {
    let kv = KernelVars::new(tape, kernel, grad);
    let z_a = tape.input(layer.z_a.clone(), grad);
    let z_b = tape.input(layer.z_b.clone(), grad);
    let mean_param = tape.input(layer.mean_param.clone(), grad);
    let b_raw = tape.input(log_diag_raw(&layer.b_chol), grad);
    let b_chol = b_raw.tril_exp_diag();
    let chol_a = match kind {
        MeanParameterization::Cb => None,
        _ => Some(kv.chol(z_a)?),
    };
    let m_b = layer.z_b.nrows();
    let kbb = kv.jittered_gram(z_b)?;
    let c = tape
        .constant(DMatrix::identity(m_b, m_b))
        .add(b_chol.t().matmul(kbb).matmul(b_chol));
    let (chol_c, _) = c.cholesky(0.0)?;
    Ok(DecoupledNodes {
        kv,
        z_a,
        z_b,
        mean_param,
        b_raw,
        b_chol,
        chol_a,
        chol_c,
    })
}

enum LayerNodes<'t> {
    Coupled(CoupledNodes<'t>),
    Decoupled(DecoupledNodes<'t>, MeanParameterization),
}

impl<'t> LayerNodes<'t> {
    fn marginal(&self, x: Var<'t>, mean_fn: &MeanFnSpec) -> Result<(Var<'t>, Var<'t>)> {
        match self {
            LayerNodes::Coupled(n) => coupled_marginal_tape(x, n, mean_fn),
            LayerNodes::Decoupled(n, kind) => decoupled_marginal_tape(x, n, *kind, mean_fn),
        }
    }

    fn kl(&self) -> Result<Var<'t>> {
        match self {
            LayerNodes::Coupled(n) => Ok(kl_coupled_tape(n.chol_k, n.m, n.s_chol)),
            LayerNodes::Decoupled(n, kind) => kl_decoupled_tape(n, *kind),
        }
    }

    fn kernel(&self) -> &KernelVars<'t> {
        match self {
            LayerNodes::Coupled(n) => &n.kv,
            LayerNodes::Decoupled(n, _) => &n.kv,
        }
    }

    /// Variational inputs in [`VarParams::pack`] order.
    fn var_inputs(&self) -> Vec<Var<'t>> {
        match self {
            LayerNodes::Coupled(n) => vec![n.m, n.s_raw],
            LayerNodes::Decoupled(n, _) => vec![n.z_a, n.z_b, n.mean_param, n.b_raw],
        }
    }
}

fn build_nodes<'t>(tape: &'t Tape, model: &DGPModel, vp: &VarParams, grad: bool) -> Result<Vec<LayerNodes<'t>>> {
    vp.check_against(model)?;
    model
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| match vp {
            VarParams::Coupled(c) => {
                coupled_nodes(tape, &layer.kernel, &layer.z, &c.layers[l], grad).map(LayerNodes::Coupled)
            }
            VarParams::Decoupled(d) => decoupled_nodes(tape, &layer.kernel, &d.layers[l], d.kind, grad)
                .map(|n| LayerNodes::Decoupled(n, d.kind)),
        })
        .collect()
}

/// One ELBO evaluation with its pieces.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboValue {
    pub elbo: f64,
    pub kl: f64,
    /// Gradient over [`dsvi_param_values`] when requested.
    pub grad: Option<DVector<f64>>,
}

/// Hyperparameters followed by the unconstrained variational parameters.
/// For the decoupled family the model's own inducing inputs are carried but
/// unused.
pub fn dsvi_param_values(model: &DGPModel, vp: &VarParams) -> DVector<f64> {
    let h = model.hyper_values();
    let v = vp.pack();
    DVector::from_iterator(h.len() + v.len(), h.iter().chain(v.iter()).copied())
}

pub fn set_dsvi_param_values(model: &mut DGPModel, vp: &mut VarParams, values: &DVector<f64>) -> Result<()> {
    let h = model.hyper_len();
    if values.len() != h + vp.pack().len() {
        return Err(DgpError::invalid("parameter vector has the wrong length"));
    }
    model.set_hyper_values(&values.rows(0, h).into_owned())?;
    vp.unpack(&values.rows(h, values.len() - h).into_owned())
}

/// ELBO for fixed propagation noise `eps` (one N_batch x D_l block per
/// layer; the last block is not used).
pub fn elbo_with_noise(
    batch: &Data,
    model: &DGPModel,
    vp: &VarParams,
    eps: &[DMatrix<f64>],
    with_grad: bool,
) -> Result<ElboValue> {
    if batch.is_empty() {
        return Err(DgpError::invalid("empty batch"));
    }
    let tape = Tape::new();
    let nodes = build_nodes(&tape, model, vp, with_grad)?;
    // model inducing inputs enter only through the coupled nodes
    let log_noise = tape.input(DMatrix::from_element(1, 1, model.log_noise_variance), with_grad);

    let mut f = tape.constant(batch.x.clone());
    let last = model.num_layers() - 1;
    let mut lik = None;
    for (l, layer) in model.layers.iter().enumerate() {
        let (mean, var) = nodes[l].marginal(f, &layer.mean_fn)?;
        if l == last {
            let d = mean.shape().1;
            let fit = gaussian_loglik_tape(tape.constant(batch.y.clone()), mean, log_noise);
            let spread = var.broadcast_cols(d).sum().mul_scalar(log_noise.neg().exp()).scale(-0.5);
            lik = Some(fit.add(spread));
        } else {
            f = sample_tape(mean, var, &eps[l]);
        }
    }
    let scale = model.n_total as f64 / batch.len() as f64;
    let mut kl = tape.scalar_constant(0.0);
    for n in &nodes {
        kl = kl.add(n.kl()?);
    }
    let elbo = lik.expect("at least one layer").scale(scale).sub(kl);
    let value = elbo.scalar();
    if !value.is_finite() {
        return Err(DgpError::numerical("ELBO is not finite", 0.0));
    }
    let grad = if with_grad {
        let mut wrt = Vec::new();
        for (l, n) in nodes.iter().enumerate() {
            let kv = n.kernel();
            wrt.push(kv.log_ls);
            wrt.push(kv.log_var);
            match n {
                LayerNodes::Coupled(c) => wrt.push(c.z),
                LayerNodes::Decoupled(..) => wrt.push(tape.constant(model.layers[l].z.clone())),
            }
        }
        wrt.push(log_noise);
        for n in &nodes {
            wrt.extend(n.var_inputs());
        }
        let grads = tape.gradient(elbo, &wrt);
        let flat: Vec<f64> = grads.iter().flat_map(|g| g.iter().copied()).collect();
        Some(DVector::from_vec(flat))
    } else {
        None
    };
    Ok(ElboValue {
        elbo: value,
        kl: kl.scalar(),
        grad,
    })
}

/// Single-sample ELBO estimate on a batch.
pub fn elbo_estimate<R: Rng + ?Sized>(batch: &Data, model: &DGPModel, vp: &VarParams, rng: &mut R) -> Result<f64> {
    let eps = model.draw_propagation_noise(batch.len(), rng);
    Ok(elbo_with_noise(batch, model, vp, &eps, false)?.elbo)
}

/// Coupled marginal of one layer, `x` in the layer's input space.
pub fn variational_marginal(
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    m: &DMatrix<f64>,
    s: &DMatrix<f64>,
    kernel: &KernelParams,
    mean_fn: &MeanFnSpec,
) -> Result<ConditionalMoments> {
    let s_chol = chol_psd(s, 0.0)?.lower;
    let layer = CoupledLayer { m: m.clone(), s_chol };
    check_coupled_shapes(x, z, &layer, kernel)?;
    let tape = Tape::new();
    let n = coupled_nodes(&tape, kernel, z, &layer, false)?;
    let (mean, var) = coupled_marginal_tape(tape.constant(x.clone()), &n, mean_fn)?;
    let d = m.ncols();
    let var_diag = var.broadcast_cols(d).value().clone();
    let mean = mean.value().clone();
    Ok(ConditionalMoments { mean, var_diag })
}

fn check_coupled_shapes(x: &DMatrix<f64>, z: &DMatrix<f64>, layer: &CoupledLayer, kernel: &KernelParams) -> Result<()> {
    let m = z.nrows();
    if x.ncols() != z.ncols() || z.ncols() != kernel.input_dim() {
        return Err(DgpError::invalid("inputs, inducing inputs and kernel differ in dimension"));
    }
    if layer.m.nrows() != m || layer.s_chol.shape() != (m, m) {
        return Err(DgpError::invalid("variational mean/covariance do not match the inducing inputs"));
    }
    Ok(())
}

/// KL(q(u) ‖ p(u)) summed over output columns, with `S` shared.
pub fn kl_coupled(m: &DMatrix<f64>, s: &DMatrix<f64>, k_zz: &DMatrix<f64>) -> Result<f64> {
    if s.shape() != k_zz.shape() || m.nrows() != k_zz.nrows() {
        return Err(DgpError::invalid("KL arguments do not conform"));
    }
    let chol_k = chol_psd(k_zz, default_jitter(k_zz))?.lower;
    let chol_s = chol_psd(s, 0.0)?.lower;
    let tape = Tape::new();
    let kl = kl_coupled_tape(tape.constant(chol_k), tape.constant(m.clone()), tape.constant(chol_s));
    Ok(kl.scalar())
}

/// Moments of the decoupled marginal at `x`.
pub fn decoupled_marginal(
    x: &DMatrix<f64>,
    layer: &DecoupledLayer,
    kernel: &KernelParams,
    kind: MeanParameterization,
    mean_fn: &MeanFnSpec,
) -> Result<ConditionalMoments> {
    if x.ncols() != kernel.input_dim() || layer.z_a.ncols() != x.ncols() || layer.z_b.ncols() != x.ncols() {
        return Err(DgpError::invalid("inputs and inducing sets differ in dimension"));
    }
    let tape = Tape::new();
    let n = decoupled_nodes(&tape, kernel, layer, kind, false)?;
    let (mean, var) = decoupled_marginal_tape(tape.constant(x.clone()), &n, kind, mean_fn)?;
    let var_diag = var.broadcast_cols(layer.mean_param.ncols()).value().clone();
    let mean = mean.value().clone();
    Ok(ConditionalMoments { mean, var_diag })
}

/// Decoupled KL term summed over output columns.
pub fn kl_decoupled(layer: &DecoupledLayer, kernel: &KernelParams, kind: MeanParameterization) -> Result<f64> {
    let tape = Tape::new();
    let n = decoupled_nodes(&tape, kernel, layer, kind, false)?;
    Ok(kl_decoupled_tape(&n, kind)?.scalar())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DsviConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Propagated samples averaged per ELBO gradient.
    pub samples: usize,
    /// Optimize only the variational parameters.
    pub fix_hyperparameters: bool,
}

impl Default for DsviConfig {
    fn default() -> Self {
        DsviConfig {
            iterations: 20_000,
            learning_rate: 0.01,
            batch_size: 10_000,
            samples: 1,
            fix_hyperparameters: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboRecord {
    pub iteration: usize,
    pub elbo: f64,
    pub kl: f64,
}

/// Stepwise form of [`dsvi_train`], for callers that want to inspect the
/// model between iterations.
#[derive(Debug, Clone)]
pub struct DsviTrainer {
    pub config: DsviConfig,
    opt: OptimizerState,
    iteration: usize,
}

impl DsviTrainer {
    pub fn new(model: &DGPModel, vp: &VarParams, config: &DsviConfig) -> Result<Self> {
        if config.samples == 0 || config.batch_size == 0 {
            return Err(DgpError::invalid("DSVI needs a positive batch size and sample count"));
        }
        vp.check_against(model)?;
        let dim = dsvi_param_values(model, vp).len();
        Ok(DsviTrainer {
            config: config.clone(),
            opt: OptimizerState::new(dim, config.learning_rate),
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// One minibatch ascent step. The returned ELBO is the estimate at the
    /// parameters before the step.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        data: &Data,
        model: &mut DGPModel,
        vp: &mut VarParams,
        rng: &mut R,
    ) -> Result<ElboRecord> {
        let config = &self.config;
        let mut theta = dsvi_param_values(model, vp);
        let batch = data.minibatch(config.batch_size, rng);
        let mut grad = DVector::zeros(theta.len());
        let (mut elbo, mut kl) = (0.0, 0.0);
        for _ in 0..config.samples {
            let eps = model.draw_propagation_noise(batch.len(), rng);
            let out = elbo_with_noise(&batch, model, vp, &eps, true)?;
            grad += out.grad.expect("gradient requested");
            elbo += out.elbo;
            kl = out.kl;
        }
        if config.fix_hyperparameters {
            grad.rows_mut(0, model.hyper_len()).fill(0.0);
        }
        let k = config.samples as f64;
        let record = ElboRecord {
            iteration: self.iteration,
            elbo: elbo / k,
            kl,
        };
        if config.learning_rate != 0.0 {
            theta += adaptive_step(&mut self.opt, &(grad / k))?;
            set_dsvi_param_values(model, vp, &theta)?;
        }
        self.iteration += 1;
        Ok(record)
    }
}

/// Joint Adam ascent on the ELBO over hyperparameters and variational
/// parameters. Returns the per-iteration ELBO estimates.
pub fn dsvi_train<R: Rng + ?Sized>(
    data: &Data,
    model: &mut DGPModel,
    vp: &mut VarParams,
    config: &DsviConfig,
    rng: &mut R,
    sink: &mut dyn FnMut(&ElboRecord),
) -> Result<Vec<ElboRecord>> {
    let mut trainer = DsviTrainer::new(model, vp, config)?;
    let mut history = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let record = trainer.step(data, model, vp, rng)?;
        sink(&record);
        history.push(record);
    }
    Ok(history)
}

/// Predictive mixture with one component per propagated sample.
pub fn dsvi_predict<R: Rng + ?Sized>(
    x_star: &DMatrix<f64>,
    model: &DGPModel,
    vp: &VarParams,
    n_samples: usize,
    rng: &mut R,
) -> Result<PredictiveMixture> {
    if n_samples == 0 {
        return Err(DgpError::invalid("need at least one predictive sample"));
    }
    let tape = Tape::new();
    let nodes = build_nodes(&tape, model, vp, false)?;
    let last = model.num_layers() - 1;
    let noise = model.noise_variance();
    let mut components = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let mut f = tape.constant(x_star.clone());
        for (l, layer) in model.layers.iter().enumerate() {
            let (mean, var) = nodes[l].marginal(f, &layer.mean_fn)?;
            let d = mean.shape().1;
            if l == last {
                let v = var.value().add_scalar(noise);
                let var = DMatrix::from_fn(v.nrows(), d, |i, _| v[i]);
                components.push((mean.value().clone(), var));
            } else {
                let eps = standard_normal(rng, x_star.nrows(), d);
                let sample = sample_tape(mean, var, &eps).value().clone();
                f = tape.constant(sample);
            }
        }
    }
    PredictiveMixture::new(components)
}

/// Marginal moments of q(u) of each layer's first output column, used by
/// the posterior diagnostics: (mean, standard deviation) per inducing output.
pub fn coupled_latent_marginals(vp: &CoupledVarParams) -> Vec<(DMatrix<f64>, DVector<f64>)> {
    vp.layers
        .iter()
        .map(|l| {
            let sd = DVector::from_iterator(l.s_chol.nrows(), l.s_chol.row_iter().map(|r| r.norm()));
            (l.m.clone(), sd)
        })
        .collect()
}

/// Draws u ~ q(u) for the coupled family, packed like the sampler's latent.
pub fn sample_coupled_latent<R: Rng + ?Sized>(vp: &CoupledVarParams, rng: &mut R) -> crate::model::FlatLatent {
    let blocks: Vec<DMatrix<f64>> = vp
        .layers
        .iter()
        .map(|l| &l.m + &l.s_chol * standard_normal(rng, l.m.nrows(), l.m.ncols()))
        .collect();
    crate::model::FlatLatent::pack(&blocks)
}
