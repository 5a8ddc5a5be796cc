//! Stochastic-gradient HMC with elementwise scale adaptation.
//!
//! The chain is written in the preconditioned form `v = ε M⁻¹ r` with
//! `M⁻¹ = diag(V̂^{-1/2})`, so every update is elementwise:
//!
//! ```text
//! u' = u + v
//! v' = v - ε² V̂^{-1/2} ∇U - d v + N(0, 2 ε² d V̂^{-1/2} - ε⁴)
//! ```
//!
//! where `∇U` is the negative log-density gradient and `d` the friction.
//! During burn-in `V̂` tracks the gradient second moment with a per-element
//! window `τ` that shrinks when the gradient is dominated by its mean.
//!
//! Deep GP chains move in whitened coordinates `v = L⁻¹u` with `L Lᵀ = K_ZZ`
//! per layer. For fixed hyperparameters the distribution of `u` is the same;
//! the prior on `v` is isotropic, which keeps dense inducing sets from making
//! the elementwise preconditioner unstable. Sample windows hold `u`.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DgpError, Result};
use crate::kernel::{chol_psd, gram, DEFAULT_RELATIVE_JITTER};
use crate::layer::standard_normal;
use crate::model::{whitened_log_joint_with_noise, Data, DGPModel, FlatLatent, GradTarget};

/// Lower bound on `V̂` wherever it is divided by.
pub const V_HAT_FLOOR: f64 = 1e-16;

/// Horizon of the fixed-window squared-gradient average kept next to `V̂`.
pub const SLOW_WINDOW: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    BurnIn,
    Sampling,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub epsilon: f64,
    pub decay: f64,
    pub initial_tau: f64,
    /// Scale applied to the prior draw used as the starting position.
    pub init_scale: f64,
    pub batch_size: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            epsilon: 0.01,
            decay: 0.05,
            initial_tau: 10.0,
            init_scale: 1e-2,
            batch_size: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerState {
    pub u: FlatLatent,
    pub v: DVector<f64>,
    pub v_hat: DVector<f64>,
    pub g_hat: DVector<f64>,
    pub tau: DVector<f64>,
    /// Squared-gradient moving average with the fixed horizon
    /// [`SLOW_WINDOW`]; `V̂` is raised to it when burn-in ends.
    pub v_hat_slow: DVector<f64>,
    pub epsilon: f64,
    pub decay: f64,
    pub phase: Phase,
    /// Number of noise-variance entries clamped to zero so far.
    pub clamp_count: u64,
    /// Gaussian noise injection; off only in tests of the deterministic part.
    pub inject_noise: bool,
}

impl SamplerState {
    /// Zero velocity, `V̂ = 1`, `g = 0`, `τ = initial_tau`.
    pub fn new(u: FlatLatent, config: &SamplerConfig) -> Result<Self> {
        if !(config.epsilon > 0.0) || !(config.decay >= 0.0) || !(config.initial_tau >= 1.0) {
            return Err(DgpError::invalid(
                "need epsilon > 0, decay >= 0 and initial tau >= 1",
            ));
        }
        let n = u.len();
        Ok(SamplerState {
            u,
            v: DVector::zeros(n),
            v_hat: DVector::from_element(n, 1.0),
            g_hat: DVector::zeros(n),
            tau: DVector::from_element(n, config.initial_tau),
            v_hat_slow: DVector::zeros(n),
            epsilon: config.epsilon,
            decay: config.decay,
            phase: Phase::BurnIn,
            clamp_count: 0,
            inject_noise: true,
        })
    }

    /// Starts from a prior draw scaled by `config.init_scale`, expressed in
    /// the whitened coordinates of [`Whitener`].
    pub fn init_from_prior<R: Rng + ?Sized>(model: &DGPModel, config: &SamplerConfig, rng: &mut R) -> Result<Self> {
        let blocks: Vec<DMatrix<f64>> = model
            .layers
            .iter()
            .map(|l| standard_normal(rng, l.num_inducing(), l.output_dim()) * config.init_scale)
            .collect();
        Self::new(FlatLatent::pack(&blocks), config)
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    /// Stops adaptation. A window `τ` near 1 leaves `V̂` close to the last
    /// squared gradient, which can be far below its typical size; the frozen
    /// `V̂` is therefore the larger of `V̂` and the fixed-horizon average.
    pub fn freeze(&mut self) {
        if self.phase == Phase::BurnIn {
            self.v_hat.zip_apply(&self.v_hat_slow, |v, s| *v = v.max(s));
        }
        self.phase = Phase::Sampling;
    }

    pub fn check_invariants(&self) -> Result<()> {
        let n = self.u.len();
        if [self.v.len(), self.v_hat.len(), self.g_hat.len(), self.tau.len(), self.v_hat_slow.len()]
            .iter()
            .any(|&k| k != n)
        {
            return Err(DgpError::InvalidState("sampler vectors differ in length".into()));
        }
        if self.v_hat.iter().any(|&x| !(x >= 0.0)) || self.tau.iter().any(|&t| !(t >= 1.0)) {
            return Err(DgpError::InvalidState("V_hat must be >= 0 and tau >= 1".into()));
        }
        Ok(())
    }
}

/// FIFO of stored samples with a fixed capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleWindow {
    capacity: usize,
    entries: VecDeque<FlatLatent>,
}

impl SampleWindow {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(DgpError::invalid("window capacity must be positive"));
        }
        Ok(SampleWindow {
            capacity,
            entries: VecDeque::with_capacity(capacity.min(4096)),
        })
    }

    /// Appends `sample`, evicting and returning the oldest entry when full.
    pub fn push(&mut self, sample: FlatLatent) -> Option<FlatLatent> {
        let evicted = if self.entries.len() == self.capacity {
            self.entries.pop_front()
        } else {
            None
        };
        self.entries.push_back(sample);
        evicted
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    pub fn get(&self, i: usize) -> Option<&FlatLatent> {
        self.entries.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &FlatLatent> {
        self.entries.iter()
    }

    /// Sample `i` stacked as a matrix: one row per sample.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let dim = self.entries.front().map(|e| e.len()).unwrap_or(0);
        DMatrix::from_fn(self.len(), dim, |i, j| self.entries[i].values[j])
    }

    pub fn from_samples(samples: Vec<FlatLatent>) -> Result<Self> {
        let mut w = Self::new(samples.len().max(1))?;
        for s in samples {
            w.push(s);
        }
        Ok(w)
    }
}

/// Elementwise update of `V̂`, `g` and `τ` from one gradient of the log
/// density. All three use the pre-update `τ`.
pub fn autotune_update(state: &mut SamplerState, grad_log_density: &DVector<f64>) -> Result<()> {
    if state.phase != Phase::BurnIn {
        return Err(DgpError::InvalidState(
            "auto-tuning statistics are frozen after burn-in".into(),
        ));
    }
    check_len(state, grad_log_density)?;
    for i in 0..state.len() {
        let grad_u = -grad_log_density[i];
        let tau = state.tau[i];
        let v_hat = state.v_hat[i] + (grad_u * grad_u - state.v_hat[i]) / tau;
        let v_hat = v_hat.max(V_HAT_FLOOR);
        let g = state.g_hat[i] + (grad_u - state.g_hat[i]) / tau;
        let new_tau = tau - (g * g / v_hat) * tau + 1.0;
        state.v_hat[i] = v_hat;
        state.g_hat[i] = g;
        // g² <= V̂ holds for matched moving averages; the floor can break it
        state.tau[i] = new_tau.max(1.0);
        state.v_hat_slow[i] += (grad_u * grad_u - state.v_hat_slow[i]) / SLOW_WINDOW;
    }
    Ok(())
}

/// One SGHMC step given the log-density gradient at the current position.
/// Draws one standard normal per coordinate regardless of clamping.
pub fn sghmc_step<R: Rng + ?Sized>(
    state: &mut SamplerState,
    grad_log_density: &DVector<f64>,
    rng: &mut R,
) -> Result<()> {
    check_len(state, grad_log_density)?;
    let eps2 = state.epsilon * state.epsilon;
    let eps4 = eps2 * eps2;
    let d = state.decay;
    for i in 0..state.len() {
        let inv_sqrt = 1.0 / state.v_hat[i].max(V_HAT_FLOOR).sqrt();
        let z: f64 = rng.sample(StandardNormal);
        let mut noise_var = 2.0 * eps2 * d * inv_sqrt - eps4;
        if noise_var < 0.0 {
            noise_var = 0.0;
            state.clamp_count += 1;
        }
        let noise = if state.inject_noise { noise_var.sqrt() * z } else { 0.0 };
        let v = state.v[i];
        state.u.values[i] += v;
        state.v[i] = v + eps2 * inv_sqrt * grad_log_density[i] - d * v + noise;
    }
    if state.u.values.iter().any(|x| !x.is_finite()) {
        return Err(DgpError::numerical("sampler position diverged", 0.0));
    }
    Ok(())
}

fn check_len(state: &SamplerState, grad: &DVector<f64>) -> Result<()> {
    if grad.len() != state.len() {
        return Err(DgpError::invalid(format!(
            "gradient has {} entries, sampler state {}",
            grad.len(),
            state.len()
        )));
    }
    Ok(())
}

/// A (possibly stochastic) log density over the chain position.
pub trait LogDensity {
    /// Log-density estimate and its gradient at `position`.
    fn value_and_grad<R: Rng + ?Sized>(&mut self, position: &FlatLatent, rng: &mut R) -> Result<(f64, DVector<f64>)>;

    /// The sample a position stands for; the identity unless the target
    /// reparameterizes.
    fn sample_of(&self, position: &FlatLatent) -> FlatLatent {
        position.clone()
    }
}

/// Per-layer Cholesky factors of `K_ZZ`, with the same jitter the log joint
/// uses, mapping whitened coordinates `v` to inducing outputs `u = L v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Whitener {
    factors: Vec<DMatrix<f64>>,
}

impl Whitener {
    pub fn new(model: &DGPModel) -> Result<Self> {
        let factors = model
            .layers
            .iter()
            .map(|l| {
                let k = gram(&l.z, &l.z, &l.kernel)?;
                let sym = (&k + k.transpose()) * 0.5;
                let base = DEFAULT_RELATIVE_JITTER * l.kernel.log_signal_variance.exp();
                Ok(chol_psd(&sym, base)?.lower)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Whitener { factors })
    }

    /// `u = L v`
    pub fn latent(&self, v: &FlatLatent) -> FlatLatent {
        let blocks: Vec<DMatrix<f64>> = v.unpack().iter().zip(&self.factors).map(|(b, l)| l * b).collect();
        v.with_values(FlatLatent::pack(&blocks).values)
    }

    /// `v = L⁻¹ u`
    pub fn whiten(&self, u: &FlatLatent) -> FlatLatent {
        let blocks: Vec<DMatrix<f64>> = u
            .unpack()
            .iter()
            .zip(&self.factors)
            .map(|(b, l)| crate::kernel::solve_lower(l, b))
            .collect();
        u.with_values(FlatLatent::pack(&blocks).values)
    }

    /// log p(u) - log p(v) for `u = L v`: `-Σ_l D_l Σ log diag L_l`.
    pub fn log_prior_shift(&self, like: &FlatLatent) -> f64 {
        like.layout
            .iter()
            .zip(&self.factors)
            .map(|(b, l)| -(b.cols as f64) * l.diagonal().iter().map(|d| d.ln()).sum::<f64>())
            .sum()
    }
}

/// Minibatch log-joint estimate of a deep GP at fixed hyperparameters, as a
/// density over whitened coordinates. Reported values are the log joint of
/// `u = L v`, which differs from that of `v` by a constant.
pub struct DgpTarget<'a> {
    pub model: &'a DGPModel,
    pub data: &'a Data,
    pub batch_size: usize,
    whitener: Whitener,
}

impl<'a> DgpTarget<'a> {
    pub fn new(model: &'a DGPModel, data: &'a Data, batch_size: usize) -> Result<Self> {
        Ok(DgpTarget { model, data, batch_size, whitener: Whitener::new(model)? })
    }

    pub fn whitener(&self) -> &Whitener {
        &self.whitener
    }
}

impl LogDensity for DgpTarget<'_> {
    fn value_and_grad<R: Rng + ?Sized>(&mut self, v: &FlatLatent, rng: &mut R) -> Result<(f64, DVector<f64>)> {
        let batch = self.data.minibatch(self.batch_size, rng);
        let eps = self.model.draw_propagation_noise(batch.len(), rng);
        let out = whitened_log_joint_with_noise(v, &batch, self.model, &eps, Some(GradTarget::Latent))?;
        let grad = out.latent.expect("latent gradient requested");
        Ok((out.value + self.whitener.log_prior_shift(v), grad))
    }

    fn sample_of(&self, v: &FlatLatent) -> FlatLatent {
        self.whitener.latent(v)
    }
}

/// Per-iteration diagnostics handed to the caller's sink.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub phase: Phase,
    pub log_joint: f64,
    pub clamp_count: u64,
}

/// Gradient, auto-tuning during burn-in, then one step.
pub fn iterate<T: LogDensity, R: Rng + ?Sized>(state: &mut SamplerState, target: &mut T, rng: &mut R) -> Result<f64> {
    let (value, grad) = target.value_and_grad(&state.u, rng)?;
    if state.phase == Phase::BurnIn {
        autotune_update(state, &grad)?;
    }
    sghmc_step(state, &grad, rng)?;
    Ok(value)
}

/// Burn-in on a target with no hyperparameters; freezes the statistics.
pub fn run_burn_in_target<T: LogDensity, R: Rng + ?Sized>(
    state: &mut SamplerState,
    target: &mut T,
    n_iters: usize,
    rng: &mut R,
    sink: &mut dyn FnMut(&IterationRecord),
) -> Result<()> {
    if n_iters == 0 {
        return Err(DgpError::invalid("burn-in needs at least one iteration"));
    }
    state.phase = Phase::BurnIn;
    for it in 0..n_iters {
        let log_joint = iterate(state, target, rng)?;
        sink(&IterationRecord {
            iteration: it,
            phase: Phase::BurnIn,
            log_joint,
            clamp_count: state.clamp_count,
        });
    }
    state.freeze();
    Ok(())
}

/// `n_samples * thin` steps with frozen statistics, keeping every
/// `thin`-th position.
pub fn run_sampling_target<T: LogDensity, R: Rng + ?Sized>(
    state: &mut SamplerState,
    target: &mut T,
    n_samples: usize,
    thin: usize,
    rng: &mut R,
    sink: &mut dyn FnMut(&IterationRecord),
) -> Result<SampleWindow> {
    if n_samples == 0 || thin == 0 {
        return Err(DgpError::invalid("n_samples and thin must be positive"));
    }
    state.freeze();
    let mut window = SampleWindow::new(n_samples)?;
    for it in 0..n_samples * thin {
        let log_joint = iterate(state, target, rng)?;
        sink(&IterationRecord {
            iteration: it,
            phase: Phase::Sampling,
            log_joint,
            clamp_count: state.clamp_count,
        });
        if (it + 1) % thin == 0 {
            window.push(target.sample_of(&state.u));
        }
    }
    Ok(window)
}

/// Hyperparameter update interleaved with burn-in iterations.
pub trait HyperStepper {
    /// Called after each sampler step with the chain's current whitened
    /// position.
    fn step<R: Rng + ?Sized>(
        &mut self,
        position: &FlatLatent,
        model: &mut DGPModel,
        data: &Data,
        rng: &mut R,
    ) -> Result<()>;
}

/// Leaves the hyperparameters untouched.
pub struct NoHyperStep;

impl HyperStepper for NoHyperStep {
    fn step<R: Rng + ?Sized>(&mut self, _: &FlatLatent, _: &mut DGPModel, _: &Data, _: &mut R) -> Result<()> {
        Ok(())
    }
}

/// Burn-in for a deep GP: each iteration runs auto-tuning and one sampler
/// step, then one hyperparameter step. Statistics are frozen at the end.
#[allow(clippy::too_many_arguments)]
pub fn run_burn_in<H: HyperStepper, R: Rng + ?Sized>(
    state: &mut SamplerState,
    model: &mut DGPModel,
    data: &Data,
    batch_size: usize,
    n_iters: usize,
    rng: &mut R,
    hyper_stepper: &mut H,
    sink: &mut dyn FnMut(&IterationRecord),
) -> Result<()> {
    if n_iters == 0 {
        return Err(DgpError::invalid("burn-in needs at least one iteration"));
    }
    state.phase = Phase::BurnIn;
    for it in 0..n_iters {
        let log_joint = {
            let mut target = DgpTarget::new(model, data, batch_size)?;
            iterate(state, &mut target, rng)?
        };
        hyper_stepper.step(&state.u, model, data, rng)?;
        sink(&IterationRecord {
            iteration: it,
            phase: Phase::BurnIn,
            log_joint,
            clamp_count: state.clamp_count,
        });
    }
    state.freeze();
    Ok(())
}

/// Sampling phase for a deep GP at fixed hyperparameters.
#[allow(clippy::too_many_arguments)]
pub fn run_sampling<R: Rng + ?Sized>(
    state: &mut SamplerState,
    model: &DGPModel,
    data: &Data,
    batch_size: usize,
    n_samples: usize,
    thin: usize,
    rng: &mut R,
    sink: &mut dyn FnMut(&IterationRecord),
) -> Result<SampleWindow> {
    let mut target = DgpTarget::new(model, data, batch_size)?;
    run_sampling_target(state, &mut target, n_samples, thin, rng, sink)
}
