//! The deep GP: a chain of sparse GP layers with a Gaussian likelihood.
//!
//! The sampler's position is the flattened set of inducing outputs
//! ([`FlatLatent`]). The log-joint is estimated with one propagated sample of
//! the layer outputs, and its gradients are pathwise: the standard-normal
//! draws used for the propagation are held fixed.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{DgpError, Result};
use crate::kernel::KernelParams;
use crate::layer::{
    conditional, conditional_tape, make_mean_fn, sample_layer, sample_tape, standard_normal, KernelVars,
    LayerState, MeanFnSpec,
};
use crate::sghmc::SampleWindow;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Inputs and targets, one point per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Data {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

impl Data {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(DgpError::invalid(format!(
                "{} input rows but {} target rows",
                x.nrows(),
                y.nrows()
            )));
        }
        if x.nrows() == 0 {
            return Err(DgpError::invalid("empty dataset"));
        }
        Ok(Data { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    /// Rows drawn uniformly without replacement; the whole set when
    /// `size >= len`.
    pub fn minibatch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Data {
        if size >= self.len() {
            return self.clone();
        }
        let rows: Vec<usize> = index::sample(rng, self.len(), size).into_vec();
        self.rows(&rows)
    }

    pub fn rows(&self, rows: &[usize]) -> Data {
        Data {
            x: self.x.select_rows(rows),
            y: self.y.select_rows(rows),
        }
    }
}

/// Placement of one layer's inducing outputs inside a [`FlatLatent`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentBlock {
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
}

/// All inducing outputs concatenated layer by layer, each block column-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatLatent {
    pub values: DVector<f64>,
    pub layout: Vec<LatentBlock>,
}

impl FlatLatent {
    pub fn pack(blocks: &[DMatrix<f64>]) -> Self {
        let layout: Vec<LatentBlock> = blocks
            .iter()
            .enumerate()
            .map(|(layer, b)| LatentBlock {
                layer,
                rows: b.nrows(),
                cols: b.ncols(),
            })
            .collect();
        let values = DVector::from_iterator(
            blocks.iter().map(|b| b.len()).sum(),
            blocks.iter().flat_map(|b| b.iter().copied()),
        );
        FlatLatent { values, layout }
    }

    pub fn unpack(&self) -> Vec<DMatrix<f64>> {
        let mut offset = 0;
        self.layout
            .iter()
            .map(|b| {
                let n = b.rows * b.cols;
                let m = DMatrix::from_column_slice(b.rows, b.cols, &self.values.as_slice()[offset..offset + n]);
                offset += n;
                m
            })
            .collect()
    }

    pub fn from_model(model: &DGPModel) -> Self {
        let blocks: Vec<DMatrix<f64>> = model.layers.iter().map(|l| l.u.clone()).collect();
        Self::pack(&blocks)
    }

    pub fn with_values(&self, values: DVector<f64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        FlatLatent {
            values,
            layout: self.layout.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_against(&self, model: &DGPModel) -> Result<()> {
        let ok = self.layout.len() == model.layers.len()
            && self
                .layout
                .iter()
                .zip(&model.layers)
                .all(|(b, l)| b.rows == l.num_inducing() && b.cols == l.output_dim());
        if !ok {
            return Err(DgpError::invalid("latent layout does not match the model"));
        }
        Ok(())
    }
}

/// Deep GP with Gaussian likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DGPModel {
    pub layers: Vec<LayerState>,
    pub log_noise_variance: f64,
    /// Training set size used to scale minibatch likelihoods.
    pub n_total: usize,
}

/// Architecture and initialization choices for [`DGPModel::build`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    /// Output width of each hidden layer.
    pub hidden_widths: Vec<usize>,
    pub num_inducing: usize,
    pub noise_variance: f64,
    pub lengthscale: f64,
    pub signal_variance: f64,
    /// Add the identity/projection mean function to hidden layers.
    pub hidden_mean_fn: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            hidden_widths: vec![],
            num_inducing: 100,
            noise_variance: 0.1,
            lengthscale: 1.0,
            signal_variance: 1.0,
            hidden_mean_fn: true,
        }
    }
}

/// Which gradients [`grad_log_joint`] should return.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    Latent,
    Hyperparameters,
    Both,
}

/// Value and gradients of the log-joint estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct LogJointGrad {
    pub value: f64,
    pub latent: Option<DVector<f64>>,
    /// Ordered as [`DGPModel::hyper_values`].
    pub hyper: Option<DVector<f64>>,
}

impl DGPModel {
    pub fn new(layers: Vec<LayerState>, log_noise_variance: f64, n_total: usize) -> Result<Self> {
        let model = DGPModel {
            layers,
            log_noise_variance,
            n_total,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(DgpError::invalid("a model needs at least one layer"));
        }
        if !self.log_noise_variance.is_finite() {
            return Err(DgpError::invalid("noise variance must be positive and finite"));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            layer
                .validate()
                .map_err(|e| DgpError::invalid(format!("layer {l}: {e}")))?;
            if l > 0 && self.layers[l - 1].output_dim() != layer.input_dim() {
                return Err(DgpError::invalid(format!(
                    "layer {l} expects {} inputs but layer {} produces {}",
                    layer.input_dim(),
                    l - 1,
                    self.layers[l - 1].output_dim()
                )));
            }
        }
        Ok(())
    }

    /// Builds a model for the given training data. Inducing inputs of the
    /// first layer are a random subset of the training inputs; deeper layers
    /// receive those points pushed through the preceding mean functions.
    pub fn build<R: Rng + ?Sized>(data: &Data, spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        let n = data.len();
        let m = spec.num_inducing;
        if m == 0 {
            return Err(DgpError::invalid("need at least one inducing point"));
        }
        let rows: Vec<usize> = if m <= n {
            index::sample(rng, n, m).into_vec()
        } else {
            (0..m).map(|i| i % n).collect()
        };
        let mut z = data.x.select_rows(&rows);
        if m > n {
            // repeated rows would make K_ZZ singular
            z += standard_normal(rng, m, z.ncols()) * 1e-2;
        }
        let mut x_through = data.x.clone();
        let mut dims = vec![data.x.ncols()];
        dims.extend(&spec.hidden_widths);
        dims.push(data.y.ncols());
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for l in 0..dims.len() - 1 {
            let (d_in, d_out) = (dims[l], dims[l + 1]);
            let last = l == dims.len() - 2;
            let mean_fn = if last || !spec.hidden_mean_fn {
                MeanFnSpec::zero()
            } else if d_out > d_in {
                MeanFnSpec::padded_identity(d_in, d_out)
            } else {
                make_mean_fn(d_in, d_out, &x_through)?
            };
            let kernel = KernelParams::new(&vec![spec.lengthscale; d_in], spec.signal_variance)?;
            let layer = LayerState::new(z.clone(), DMatrix::zeros(m, d_out), kernel, mean_fn)?;
            if !last {
                let zero = DMatrix::zeros(z.nrows(), d_out);
                z = layer.mean_fn.apply(&z).unwrap_or(zero);
                let zero = DMatrix::zeros(x_through.nrows(), d_out);
                x_through = layer.mean_fn.apply(&x_through).unwrap_or(zero);
            }
            layers.push(layer);
        }
        DGPModel::new(layers, spec.noise_variance.ln(), n)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise_variance.exp()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.output_dim()).unwrap_or(0)
    }

    /// Hyperparameters as one vector: for each layer the log-lengthscales,
    /// the log signal variance and the inducing inputs (column-major), then
    /// the log noise variance.
    pub fn hyper_values(&self) -> DVector<f64> {
        let mut v = Vec::new();
        for layer in &self.layers {
            v.extend(layer.kernel.log_lengthscales.iter());
            v.push(layer.kernel.log_signal_variance);
            v.extend(layer.z.iter());
        }
        v.push(self.log_noise_variance);
        DVector::from_vec(v)
    }

    pub fn set_hyper_values(&mut self, values: &DVector<f64>) -> Result<()> {
        if values.len() != self.hyper_len() {
            return Err(DgpError::invalid(format!(
                "hyperparameter vector has {} entries, model needs {}",
                values.len(),
                self.hyper_len()
            )));
        }
        let mut it = values.iter().copied();
        for layer in &mut self.layers {
            for l in layer.kernel.log_lengthscales.iter_mut() {
                *l = it.next().unwrap();
            }
            layer.kernel.log_signal_variance = it.next().unwrap();
            for z in layer.z.iter_mut() {
                *z = it.next().unwrap();
            }
        }
        self.log_noise_variance = it.next().unwrap();
        Ok(())
    }

    pub fn hyper_len(&self) -> usize {
        self.layers.iter().map(|l| l.input_dim() + 1 + l.z.len()).sum::<usize>() + 1
    }

    /// Standard-normal draws for one propagation of `n` points, in the order
    /// [`propagate`] consumes them.
    pub fn draw_propagation_noise<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<DMatrix<f64>> {
        self.layers
            .iter()
            .map(|l| standard_normal(rng, n, l.output_dim()))
            .collect()
    }
}

/// Per-layer nodes shared by the likelihood and prior terms.
pub(crate) struct LayerNodes<'t> {
    pub z: Var<'t>,
    pub kv: KernelVars<'t>,
    pub chol: Var<'t>,
}

pub(crate) fn layer_nodes<'t>(tape: &'t Tape, layer: &LayerState, grad: bool) -> Result<LayerNodes<'t>> {
    let kv = KernelVars::new(tape, &layer.kernel, grad);
    let z = tape.input(layer.z.clone(), grad);
    let chol = kv.chol(z)?;
    Ok(LayerNodes { z, kv, chol })
}

/// Hyperparameter gradients of the layer nodes in [`DGPModel::hyper_values`]
/// order, with `noise` appended.
pub(crate) fn collect_hyper_grads<'t>(
    tape: &'t Tape,
    output: Var<'t>,
    nodes: &[LayerNodes<'t>],
    log_noise: Var<'t>,
    extra: &[Var<'t>],
) -> (DVector<f64>, Vec<DMatrix<f64>>) {
    let mut wrt = Vec::new();
    for n in nodes {
        wrt.push(n.kv.log_ls);
        wrt.push(n.kv.log_var);
        wrt.push(n.z);
    }
    wrt.push(log_noise);
    wrt.extend_from_slice(extra);
    let mut grads = tape.gradient(output, &wrt);
    let rest = grads.split_off(3 * nodes.len() + 1);
    let flat: Vec<f64> = grads.iter().flat_map(|g| g.iter().copied()).collect();
    (DVector::from_vec(flat), rest)
}

/// Σ log N(y; f, σ²) on the tape.
pub(crate) fn gaussian_loglik_tape<'t>(y: Var<'t>, f: Var<'t>, log_noise: Var<'t>) -> Var<'t> {
    let count = {
        let v = y.value();
        (v.nrows() * v.ncols()) as f64
    };
    let quad = y.sub(f).sum_sq().mul_scalar(log_noise.neg().exp()).scale(-0.5);
    let norm = log_noise.scale(-0.5 * count);
    quad.add(norm).add(y.tape().scalar_constant(-0.5 * count * LN_2PI))
}

/// log N(u_l; 0, K_ZZ) summed over layers and output columns.
pub(crate) fn log_prior_tape<'t>(nodes: &[LayerNodes<'t>], u: &[Var<'t>]) -> Var<'t> {
    let tape = u[0].tape();
    let mut total = tape.scalar_constant(0.0);
    for (n, u) in nodes.iter().zip(u) {
        let (m, d) = u.shape();
        let w = n.chol.solve_lower(*u);
        let term = w
            .sum_sq()
            .scale(-0.5)
            .sub(n.chol.log_diag_sum().scale(d as f64))
            .add(tape.scalar_constant(-0.5 * (m * d) as f64 * LN_2PI));
        total = total.add(term);
    }
    total
}

fn check_batch(model: &DGPModel, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
    if x.nrows() == 0 {
        return Err(DgpError::invalid("empty batch"));
    }
    if x.nrows() != y.nrows() {
        return Err(DgpError::invalid("batch inputs and targets differ in length"));
    }
    if x.ncols() != model.layers[0].input_dim() {
        return Err(DgpError::invalid(format!(
            "batch has {} input columns, model expects {}",
            x.ncols(),
            model.layers[0].input_dim()
        )));
    }
    if y.ncols() != model.output_dim() {
        return Err(DgpError::invalid(format!(
            "batch has {} target columns, model produces {}",
            y.ncols(),
            model.output_dim()
        )));
    }
    Ok(())
}

/// Log-joint estimate and its pathwise gradients for fixed propagation
/// noise `eps` (one N_batch x D_l matrix per layer).
pub fn log_joint_with_noise(
    latent: &FlatLatent,
    batch: &Data,
    model: &DGPModel,
    eps: &[DMatrix<f64>],
    wrt: Option<GradTarget>,
) -> Result<LogJointGrad> {
    joint_on_tape(latent, batch, model, eps, wrt, false)
}

/// The same estimate in whitened coordinates `v = L⁻¹u` (`L Lᵀ = K_ZZ` per
/// layer): returns log p(y, v | θ), whose prior term N(v; 0, I) does not
/// depend on θ, with gradients with respect to `v` and θ. It differs from
/// the log joint of `u = L v` by `D Σ log diag L` per layer.
pub fn whitened_log_joint_with_noise(
    position: &FlatLatent,
    batch: &Data,
    model: &DGPModel,
    eps: &[DMatrix<f64>],
    wrt: Option<GradTarget>,
) -> Result<LogJointGrad> {
    joint_on_tape(position, batch, model, eps, wrt, true)
}

fn joint_on_tape(
    latent: &FlatLatent,
    batch: &Data,
    model: &DGPModel,
    eps: &[DMatrix<f64>],
    wrt: Option<GradTarget>,
    whitened: bool,
) -> Result<LogJointGrad> {
    latent.check_against(model)?;
    check_batch(model, &batch.x, &batch.y)?;
    let grad_latent = matches!(wrt, Some(GradTarget::Latent | GradTarget::Both));
    let grad_hyper = matches!(wrt, Some(GradTarget::Hyperparameters | GradTarget::Both));
    let tape = Tape::new();
    let nodes = model
        .layers
        .iter()
        .map(|l| layer_nodes(&tape, l, grad_hyper))
        .collect::<Result<Vec<_>>>()?;
    let inputs: Vec<Var> = latent.unpack().into_iter().map(|u| tape.input(u, grad_latent)).collect();
    let us: Vec<Var> = if whitened {
        nodes.iter().zip(&inputs).map(|(n, v)| n.chol.matmul(*v)).collect()
    } else {
        inputs.clone()
    };
    let log_noise = tape.input(DMatrix::from_element(1, 1, model.log_noise_variance), grad_hyper);

    let mut f = tape.constant(batch.x.clone());
    for (l, layer) in model.layers.iter().enumerate() {
        let n = &nodes[l];
        let (mean, var) = conditional_tape(f, n.z, &n.kv, n.chol, us[l], &layer.mean_fn)?;
        f = sample_tape(mean, var, &eps[l]);
    }
    let scale = model.n_total as f64 / batch.len() as f64;
    let lik = gaussian_loglik_tape(tape.constant(batch.y.clone()), f, log_noise).scale(scale);
    let prior = if whitened {
        let count = latent.len() as f64;
        inputs
            .iter()
            .fold(tape.scalar_constant(-0.5 * count * LN_2PI), |acc, v| acc.add(v.sum_sq().scale(-0.5)))
    } else {
        log_prior_tape(&nodes, &us)
    };
    let total = lik.add(prior);
    let value = total.scalar();
    if !value.is_finite() {
        return Err(DgpError::numerical("log-joint estimate is not finite", 0.0));
    }

    let mut out = LogJointGrad {
        value,
        latent: None,
        hyper: None,
    };
    if grad_hyper {
        let (hyper, rest) = collect_hyper_grads(&tape, total, &nodes, log_noise, &inputs);
        out.hyper = Some(hyper);
        if grad_latent {
            out.latent = Some(DVector::from_iterator(
                latent.len(),
                rest.iter().flat_map(|g| g.iter().copied()),
            ));
        }
    } else if grad_latent {
        let g = tape.gradient(total, &inputs);
        out.latent = Some(DVector::from_iterator(latent.len(), g.iter().flat_map(|g| g.iter().copied())));
    }
    Ok(out)
}

/// (N_total / |batch|) log p(y_b | f_L) + log p(u) with f drawn by one
/// propagation through the layers.
pub fn log_joint_estimate<R: Rng + ?Sized>(
    latent: &FlatLatent,
    batch: &Data,
    model: &DGPModel,
    rng: &mut R,
) -> Result<f64> {
    let eps = model.draw_propagation_noise(batch.len(), rng);
    Ok(log_joint_with_noise(latent, batch, model, &eps, None)?.value)
}

/// Pathwise gradient of [`log_joint_estimate`] for the noise drawn from `rng`.
pub fn grad_log_joint<R: Rng + ?Sized>(
    latent: &FlatLatent,
    batch: &Data,
    model: &DGPModel,
    rng: &mut R,
    wrt: GradTarget,
) -> Result<LogJointGrad> {
    let eps = model.draw_propagation_noise(batch.len(), rng);
    log_joint_with_noise(latent, batch, model, &eps, Some(wrt))
}

/// Σ_l log N(u_l; 0, K_{Z_l Z_l}) including normalization constants.
pub fn log_prior(latent: &FlatLatent, model: &DGPModel) -> Result<f64> {
    latent.check_against(model)?;
    let tape = Tape::new();
    let nodes = model
        .layers
        .iter()
        .map(|l| layer_nodes(&tape, l, false))
        .collect::<Result<Vec<_>>>()?;
    let us: Vec<Var> = latent.unpack().into_iter().map(|u| tape.constant(u)).collect();
    Ok(log_prior_tape(&nodes, &us).scalar())
}

/// Σ over entries of log N(y; f, σ²).
pub fn gaussian_loglik(y: &DMatrix<f64>, f: &DMatrix<f64>, log_noise_variance: f64) -> Result<f64> {
    if y.shape() != f.shape() {
        return Err(DgpError::invalid("targets and outputs differ in shape"));
    }
    let var = log_noise_variance.exp();
    let count = y.len() as f64;
    Ok(-0.5 * count * (LN_2PI + log_noise_variance) - 0.5 * (y - f).norm_squared() / var)
}

/// Draws f_1..f_L for inputs `x` given the inducing outputs in `latent`.
pub fn propagate<R: Rng + ?Sized>(
    x: &DMatrix<f64>,
    latent: &FlatLatent,
    model: &DGPModel,
    rng: &mut R,
) -> Result<Vec<DMatrix<f64>>> {
    latent.check_against(model)?;
    let us = latent.unpack();
    let mut outputs = Vec::with_capacity(model.num_layers());
    let mut f = x.clone();
    for (layer, u) in model.layers.iter().zip(us) {
        let layer = LayerState { u, ..layer.clone() };
        let moments = conditional(&f, &layer)?;
        f = sample_layer(&moments, rng);
        outputs.push(f.clone());
    }
    Ok(outputs)
}

/// Uniformly weighted Gaussian mixture over test points.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveMixture {
    /// (mean, variance), each N* x P.
    pub components: Vec<(DMatrix<f64>, DMatrix<f64>)>,
}

impl PredictiveMixture {
    pub fn new(components: Vec<(DMatrix<f64>, DMatrix<f64>)>) -> Result<Self> {
        let Some((m0, _)) = components.first() else {
            return Err(DgpError::InvalidState("mixture has no components".into()));
        };
        let shape = m0.shape();
        for (m, v) in &components {
            if m.shape() != shape || v.shape() != shape {
                return Err(DgpError::invalid("mixture components differ in shape"));
            }
            if v.iter().any(|&x| !(x > 0.0)) {
                return Err(DgpError::invalid("mixture variances must be positive"));
            }
        }
        Ok(PredictiveMixture { components })
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Average of the component means.
    pub fn mean(&self) -> DMatrix<f64> {
        let mut acc = DMatrix::zeros(self.components[0].0.nrows(), self.components[0].0.ncols());
        for (m, _) in &self.components {
            acc += m;
        }
        acc / self.components.len() as f64
    }

    /// Mixture variance (law of total variance).
    pub fn variance(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let mut acc = DMatrix::zeros(mean.nrows(), mean.ncols());
        for (m, v) in &self.components {
            acc += v + m.component_mul(m);
        }
        acc / self.components.len() as f64 - mean.component_mul(&mean)
    }
}

/// One component per stored sample: propagate stochastically to the last
/// hidden layer, then take the final layer's conditional mean and variance
/// plus the noise variance.
pub fn predict_mixture<R: Rng + ?Sized>(
    x_star: &DMatrix<f64>,
    window: &SampleWindow,
    model: &DGPModel,
    rng: &mut R,
) -> Result<PredictiveMixture> {
    if window.is_empty() {
        return Err(DgpError::InvalidState("cannot predict from an empty sample window".into()));
    }
    let components = window
        .iter()
        .map(|sample| predict_component(x_star, sample, model, rng))
        .collect::<Result<Vec<_>>>()?;
    PredictiveMixture::new(components)
}

fn predict_component<R: Rng + ?Sized>(
    x_star: &DMatrix<f64>,
    sample: &FlatLatent,
    model: &DGPModel,
    rng: &mut R,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    sample.check_against(model)?;
    let us = sample.unpack();
    let last = model.num_layers() - 1;
    let mut f = x_star.clone();
    for (l, (layer, u)) in model.layers.iter().zip(us).enumerate() {
        let layer = LayerState { u, ..layer.clone() };
        let moments = conditional(&f, &layer)?;
        if l == last {
            let var = moments.var_diag.add_scalar(model.noise_variance());
            return Ok((moments.mean, var));
        }
        f = sample_layer(&moments, rng);
    }
    unreachable!("models have at least one layer")
}

/// Mean over test rows of log((1/S) Σ_s N(y; mean_s, var_s)), with the
/// density of a row being the product over output columns.
pub fn mixture_mll(mixture: &PredictiveMixture, y_star: &DMatrix<f64>) -> Result<f64> {
    if mixture.is_empty() {
        return Err(DgpError::InvalidState("empty mixture".into()));
    }
    if mixture.components[0].0.shape() != y_star.shape() {
        return Err(DgpError::invalid("targets do not match the predictive shape"));
    }
    let s = mixture.len() as f64;
    let n = y_star.nrows();
    let mut total = 0.0;
    let mut terms = vec![0.0; mixture.len()];
    for i in 0..n {
        for (k, (m, v)) in mixture.components.iter().enumerate() {
            let mut lp = 0.0;
            for p in 0..y_star.ncols() {
                let r = y_star[(i, p)] - m[(i, p)];
                lp += -0.5 * (LN_2PI + v[(i, p)].ln()) - 0.5 * r * r / v[(i, p)];
            }
            terms[k] = lp;
        }
        total += log_sum_exp(&terms) - s.ln();
    }
    Ok(total / n as f64)
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_layer_model(rng: &mut ChaCha8Rng) -> (DGPModel, Data) {
        let x = standard_normal(rng, 12, 2);
        let y = DMatrix::from_fn(12, 1, |i, _| (x[(i, 0)] * 1.3).sin() + 0.1 * x[(i, 1)]);
        let data = Data::new(x, y).unwrap();
        let spec = ModelSpec {
            hidden_widths: vec![2],
            num_inducing: 5,
            ..ModelSpec::default()
        };
        let mut model = DGPModel::build(&data, &spec, rng).unwrap();
        for layer in &mut model.layers {
            layer.u = standard_normal(rng, layer.u.nrows(), layer.u.ncols()) * 0.5;
        }
        (model, data)
    }

    #[test]
    fn ln_2pi_constant() {
        assert_abs_diff_eq!(LN_2PI, (2.0 * PI).ln(), epsilon = 1e-15);
    }

    #[test]
    fn latent_pack_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let blocks = vec![standard_normal(&mut rng, 3, 2), standard_normal(&mut rng, 4, 1)];
        let flat = FlatLatent::pack(&blocks);
        assert_eq!(flat.len(), 10);
        assert_eq!(flat.unpack(), blocks);
        assert_eq!(flat.layout[1], LatentBlock { layer: 1, rows: 4, cols: 1 });
    }

    #[test]
    fn scalar_prior_and_likelihood() {
        let layer = LayerState::new(
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            KernelParams::isotropic(1),
            MeanFnSpec::zero(),
        )
        .unwrap();
        let model = DGPModel::new(vec![layer], 0.0, 1).unwrap();
        let lp = log_prior(&FlatLatent::from_model(&model), &model).unwrap();
        // jitter 1e-6 shifts log det by ~1e-6
        assert_abs_diff_eq!(lp, -0.918939, epsilon = 2e-6);

        let y = DMatrix::from_element(1, 1, 0.4);
        assert_abs_diff_eq!(gaussian_loglik(&y, &y, 0.0).unwrap(), -0.918939, epsilon = 1e-6);
        let f = DMatrix::from_element(1, 1, 1.4);
        let ln_var = 0.3f64;
        let diff = gaussian_loglik(&y, &y, ln_var).unwrap() - gaussian_loglik(&y, &f, ln_var).unwrap();
        assert_abs_diff_eq!(diff, 1.0 / (2.0 * ln_var.exp()), epsilon = 1e-12);
    }

    #[test]
    fn prior_quadratic_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (model, _) = two_layer_model(&mut rng);
        let u = FlatLatent::from_model(&model);
        let zero = u.with_values(DVector::zeros(u.len()));
        let twice = u.with_values(&u.values * 2.0);
        let p0 = log_prior(&zero, &model).unwrap();
        let p1 = log_prior(&u, &model).unwrap();
        let p2 = log_prior(&twice, &model).unwrap();
        assert_abs_diff_eq!(p0 - p2, 4.0 * (p0 - p1), epsilon = 1e-8);
        // zero quadratic form leaves only the normalizer
        let expected: f64 = model
            .layers
            .iter()
            .map(|l| {
                let k = crate::kernel::gram(&l.z, &l.z, &l.kernel).unwrap();
                let f = crate::kernel::chol_psd(&k, crate::kernel::default_jitter(&k)).unwrap();
                let (m, d) = (l.num_inducing() as f64, l.output_dim() as f64);
                -0.5 * d * (m * LN_2PI + f.log_det())
            })
            .sum();
        assert_abs_diff_eq!(p0, expected, epsilon = 1e-10);
    }

    #[test]
    fn prior_gradient_vanishes_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (model, data) = two_layer_model(&mut rng);
        let u = FlatLatent::from_model(&model);
        let zero = u.with_values(DVector::zeros(u.len()));
        let tape = Tape::new();
        let nodes: Vec<_> = model.layers.iter().map(|l| layer_nodes(&tape, l, false).unwrap()).collect();
        let us: Vec<_> = zero.unpack().into_iter().map(|m| tape.variable(m)).collect();
        let lp = log_prior_tape(&nodes, &us);
        for g in tape.gradient(lp, &us) {
            assert!(g.amax() == 0.0);
        }
        let _ = data;
    }

    #[test]
    fn likelihood_gradient_scales_with_dataset_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut model, data) = two_layer_model(&mut rng);
        let u = FlatLatent::from_model(&model);
        let zero_prior_grad = {
            let eps = model.draw_propagation_noise(data.len(), &mut ChaCha8Rng::seed_from_u64(5));
            log_joint_with_noise(&u, &data, &model, &eps, Some(GradTarget::Latent)).unwrap()
        };
        model.n_total = 3 * data.len();
        let eps = model.draw_propagation_noise(data.len(), &mut ChaCha8Rng::seed_from_u64(5));
        let tripled = log_joint_with_noise(&u, &data, &model, &eps, Some(GradTarget::Latent)).unwrap();
        let tape = Tape::new();
        let nodes: Vec<_> = model.layers.iter().map(|l| layer_nodes(&tape, l, false).unwrap()).collect();
        let us: Vec<_> = u.unpack().into_iter().map(|m| tape.variable(m)).collect();
        let lp = log_prior_tape(&nodes, &us);
        let prior_grad: Vec<f64> = tape.gradient(lp, &us).iter().flat_map(|g| g.iter().copied()).collect();
        let prior_grad = DVector::from_vec(prior_grad);
        let lik1 = zero_prior_grad.latent.unwrap() - &prior_grad;
        let lik3 = tripled.latent.unwrap() - &prior_grad;
        assert!((lik3 - lik1 * 3.0).amax() < 1e-8);
    }

    #[test]
    fn single_layer_reduces_to_conditional_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = standard_normal(&mut rng, 8, 1);
        let y = x.map(f64::sin);
        let data = Data::new(x.clone(), y).unwrap();
        let mut model = DGPModel::build(&data, &ModelSpec { num_inducing: 4, ..Default::default() }, &mut rng).unwrap();
        model.layers[0].u = standard_normal(&mut rng, 4, 1);
        let latent = FlatLatent::from_model(&model);
        let f = propagate(&x, &latent, &model, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let moments = conditional(&x, &model.layers[0]).unwrap();
        let direct = sample_layer(&moments, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(f.len(), 1);
        assert!((&f[0] - direct).amax() < 1e-12);
    }

    #[test]
    fn zero_variance_pipe_composes_means() {
        // queries at the inducing inputs of every layer
        let z = DMatrix::from_column_slice(3, 1, &[-1.0, 0.0, 1.0]);
        let u1 = DMatrix::from_column_slice(3, 1, &[-1.0, 0.0, 1.0]);
        let u2 = DMatrix::from_column_slice(3, 1, &[0.5, 0.2, -0.3]);
        let l1 = LayerState::new(z.clone(), u1.clone(), KernelParams::isotropic(1), MeanFnSpec::zero()).unwrap();
        let l2 = LayerState::new(z.clone(), u2.clone(), KernelParams::isotropic(1), MeanFnSpec::zero()).unwrap();
        let model = DGPModel::new(vec![l1, l2], (0.1f64).ln(), 3).unwrap();
        let latent = FlatLatent::from_model(&model);
        let f = propagate(&z, &latent, &model, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!((&f[0] - &u1).amax() < 1e-2);
        assert!((&f[1] - &u2).amax() < 1e-2);
    }

    #[test]
    fn log_joint_composition_on_full_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (model, data) = two_layer_model(&mut rng);
        let single = DGPModel {
            layers: vec![model.layers[1].clone()],
            ..model.clone()
        };
        let batch = Data::new(model.layers[1].z.clone(), DMatrix::from_element(5, 1, 0.3)).unwrap();
        let mut single = single;
        single.n_total = batch.len();
        let latent = FlatLatent::from_model(&single);
        let est = log_joint_estimate(&latent, &batch, &single, &mut rng).unwrap();
        let f = conditional(&batch.x, &single.layers[0]).unwrap();
        // at the inducing inputs the sampled output is the mean up to jitter noise
        let exact = gaussian_loglik(&batch.y, &f.mean, single.log_noise_variance).unwrap()
            + log_prior(&latent, &single).unwrap();
        assert_abs_diff_eq!(est, exact, epsilon = 1e-2);
        let _ = data;
    }

    #[test]
    fn propagation_means_agree_across_seeds() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (model, data) = two_layer_model(&mut rng);
        let latent = FlatLatent::from_model(&model);
        let x = data.x.rows(0, 1).into_owned();
        let reps = 10_000;
        let run = |seed: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..reps).map(|_| propagate(&x, &latent, &model, &mut r).unwrap()[1][0]).collect();
            let mean = v.iter().sum::<f64>() / reps as f64;
            let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
            (mean, var, v[0])
        };
        let (m1, v1, first1) = run(100);
        let (m2, v2, first2) = run(200);
        assert_ne!(first1, first2);
        let se = ((v1 + v2) / reps as f64).sqrt();
        assert!((m1 - m2).abs() < 3.0 * se, "{m1} vs {m2} (se {se})");
    }

    #[test]
    fn mixture_mll_hand_values() {
        let one = |m: f64, v: f64| (DMatrix::from_element(1, 1, m), DMatrix::from_element(1, 1, v));
        let y = DMatrix::from_element(1, 1, 0.0);
        let single = PredictiveMixture::new(vec![one(0.0, 1.0)]).unwrap();
        assert_abs_diff_eq!(mixture_mll(&single, &y).unwrap(), -0.918939, epsilon = 1e-6);
        let dup = PredictiveMixture::new(vec![one(0.0, 1.0), one(0.0, 1.0), one(0.0, 1.0)]).unwrap();
        assert_abs_diff_eq!(mixture_mll(&dup, &y).unwrap(), mixture_mll(&single, &y).unwrap(), epsilon = 1e-14);
        let pair = PredictiveMixture::new(vec![one(1.0, 1.0), one(-1.0, 1.0)]).unwrap();
        assert_abs_diff_eq!(mixture_mll(&pair, &y).unwrap(), -1.418939, epsilon = 1e-6);
        let swapped = PredictiveMixture::new(vec![one(-1.0, 1.0), one(1.0, 1.0)]).unwrap();
        assert_eq!(mixture_mll(&pair, &y).unwrap(), mixture_mll(&swapped, &y).unwrap());
        assert_eq!(pair.mean()[0], 0.0);
        assert!(PredictiveMixture::new(vec![]).is_err());
    }

    #[test]
    fn hyper_vector_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut model, _) = two_layer_model(&mut rng);
        let v = model.hyper_values();
        assert_eq!(v.len(), model.hyper_len());
        let shifted = v.add_scalar(0.25);
        model.set_hyper_values(&shifted).unwrap();
        assert_eq!(model.hyper_values(), shifted);
        assert!(model.set_hyper_values(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn log_joint_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (mut model, data) = two_layer_model(&mut rng);
        model.n_total = 40;
        let latent = FlatLatent::from_model(&model);
        let eps = model.draw_propagation_noise(data.len(), &mut rng);
        let g = log_joint_with_noise(&latent, &data, &model, &eps, Some(GradTarget::Both)).unwrap();
        let only_latent = log_joint_with_noise(&latent, &data, &model, &eps, Some(GradTarget::Latent)).unwrap();
        let only_hyper = log_joint_with_noise(&latent, &data, &model, &eps, Some(GradTarget::Hyperparameters)).unwrap();
        assert_eq!(g.latent, only_latent.latent);
        assert_eq!(g.hyper, only_hyper.hyper);
        assert!(only_latent.hyper.is_none() && only_hyper.latent.is_none());

        let h = 1e-5;
        let gl = g.latent.unwrap();
        for i in 0..latent.len() {
            let f = |d: f64| {
                let mut v = latent.values.clone();
                v[i] += d;
                log_joint_with_noise(&latent.with_values(v), &data, &model, &eps, None).unwrap().value
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            assert!((fd - gl[i]).abs() < 1e-4 * (1.0 + fd.abs()), "latent {i}: {fd} vs {}", gl[i]);
        }
        let gh = g.hyper.unwrap();
        let theta = model.hyper_values();
        for i in 0..theta.len() {
            let f = |d: f64| {
                let mut m = model.clone();
                let mut t = theta.clone();
                t[i] += d;
                m.set_hyper_values(&t).unwrap();
                log_joint_with_noise(&latent, &data, &m, &eps, None).unwrap().value
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            assert!((fd - gh[i]).abs() < 1e-4 * (1.0 + fd.abs()), "hyper {i}: {fd} vs {}", gh[i]);
        }
    }

    #[test]
    fn estimate_is_jensen_lower_bound_in_expectation() {
        // E_f[log p(y|f)] <= log E_f[p(y|f)]; with one layer the right side is closed form
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = standard_normal(&mut rng, 6, 1);
        let y = x.map(|v| v.cos());
        let data = Data::new(x.clone(), y.clone()).unwrap();
        let mut model = DGPModel::build(&data, &ModelSpec { num_inducing: 3, ..Default::default() }, &mut rng).unwrap();
        model.layers[0].u = standard_normal(&mut rng, 3, 1);
        let latent = FlatLatent::from_model(&model);
        let reps = 4000;
        let avg = (0..reps)
            .map(|_| log_joint_estimate(&latent, &data, &model, &mut rng).unwrap())
            .sum::<f64>()
            / reps as f64;
        let mom = conditional(&x, &model.layers[0]).unwrap();
        let noise = model.noise_variance();
        let mut exact = log_prior(&latent, &model).unwrap();
        let mut expected_lik = exact;
        for i in 0..x.nrows() {
            let v = mom.var_diag[i] + noise;
            let r = y[i] - mom.mean[i];
            exact += -0.5 * (LN_2PI + v.ln()) - 0.5 * r * r / v;
            expected_lik += -0.5 * (LN_2PI + noise.ln()) - 0.5 * (r * r + mom.var_diag[i]) / noise;
        }
        assert!(avg <= exact);
        assert_abs_diff_eq!(avg, expected_lik, epsilon = 0.05 * (1.0 + expected_lik.abs()));
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (model, _) = two_layer_model(&mut rng);
        let latent = FlatLatent::from_model(&model);
        let empty = Data { x: DMatrix::zeros(0, 2), y: DMatrix::zeros(0, 1) };
        assert!(log_joint_estimate(&latent, &empty, &model, &mut rng).is_err());
    }
}
