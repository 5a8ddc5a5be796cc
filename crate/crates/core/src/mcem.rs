//! Hyperparameter optimization while sampling.
//!
//! Moving Window MCEM takes one ascent step per sampler step, on the log
//! joint of a sample drawn uniformly from the most recent `m` chain states.
//! The MCEM baseline alternates between collecting `m` fresh samples and a
//! block of ascent steps on their average log joint.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DgpError, Result};
use crate::model::{whitened_log_joint_with_noise, Data, DGPModel, FlatLatent, GradTarget};
use crate::sghmc::{iterate, DgpTarget, HyperStepper, IterationRecord, Phase, SampleWindow, SamplerState};

/// Which part of the model a run of [`HyperVector`] entries belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HyperKind {
    LogLengthscales,
    LogSignalVariance,
    InducingInputs,
    LogNoiseVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperBlock {
    /// `None` for the likelihood.
    pub layer: Option<usize>,
    pub kind: HyperKind,
    pub len: usize,
}

/// All hyperparameters in one vector, ordered as
/// [`DGPModel::hyper_values`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperVector {
    pub values: DVector<f64>,
    pub layout: Vec<HyperBlock>,
}

impl HyperVector {
    pub fn pack(model: &DGPModel) -> Self {
        let mut layout = Vec::new();
        for (l, layer) in model.layers.iter().enumerate() {
            layout.push(HyperBlock {
                layer: Some(l),
                kind: HyperKind::LogLengthscales,
                len: layer.input_dim(),
            });
            layout.push(HyperBlock {
                layer: Some(l),
                kind: HyperKind::LogSignalVariance,
                len: 1,
            });
            layout.push(HyperBlock {
                layer: Some(l),
                kind: HyperKind::InducingInputs,
                len: layer.z.len(),
            });
        }
        layout.push(HyperBlock {
            layer: None,
            kind: HyperKind::LogNoiseVariance,
            len: 1,
        });
        HyperVector {
            values: model.hyper_values(),
            layout,
        }
    }

    pub fn unpack_into(&self, model: &mut DGPModel) -> Result<()> {
        if self.layout != HyperVector::pack(model).layout {
            return Err(DgpError::invalid("hyperparameter layout does not match the model"));
        }
        model.set_hyper_values(&self.values)
    }

    /// Entries of one block.
    pub fn block(&self, layer: Option<usize>, kind: HyperKind) -> Option<&[f64]> {
        let mut offset = 0;
        for b in &self.layout {
            if b.layer == layer && b.kind == kind {
                return Some(&self.values.as_slice()[offset..offset + b.len]);
            }
            offset += b.len;
        }
        None
    }
}

/// Bias-corrected first/second-moment ascent (Adam).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: DVector<f64>,
    pub v: DVector<f64>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(dim: usize, learning_rate: f64) -> Self {
        OptimizerState {
            m: DVector::zeros(dim),
            v: DVector::zeros(dim),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Returns the ascent update for `grad` and advances the moment estimates.
pub fn adaptive_step(opt: &mut OptimizerState, grad: &DVector<f64>) -> Result<DVector<f64>> {
    if grad.len() != opt.m.len() {
        return Err(DgpError::invalid(format!(
            "gradient has {} entries, optimizer {}",
            grad.len(),
            opt.m.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(DgpError::numerical("non-finite hyperparameter gradient", 0.0));
    }
    opt.step += 1;
    let t = opt.step as i32;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    let mut update = DVector::zeros(grad.len());
    for i in 0..grad.len() {
        opt.m[i] = opt.beta1 * opt.m[i] + (1.0 - opt.beta1) * grad[i];
        opt.v[i] = opt.beta2 * opt.v[i] + (1.0 - opt.beta2) * grad[i] * grad[i];
        let m_hat = opt.m[i] / c1;
        let v_hat = opt.v[i] / c2;
        update[i] = opt.learning_rate * m_hat / (v_hat.sqrt() + opt.eps);
    }
    Ok(update)
}

/// Log joint of a latent sample as a function of the hyperparameters.
pub trait HyperObjective {
    fn value_and_grad<R: Rng + ?Sized>(
        &mut self,
        theta: &DVector<f64>,
        u: &FlatLatent,
        rng: &mut R,
    ) -> Result<(f64, DVector<f64>)>;
}

/// Minibatch log-joint estimate of a deep GP.
pub struct DgpObjective<'a> {
    pub model: DGPModel,
    pub data: &'a Data,
    pub batch_size: usize,
}

impl HyperObjective for DgpObjective<'_> {
    fn value_and_grad<R: Rng + ?Sized>(
        &mut self,
        theta: &DVector<f64>,
        u: &FlatLatent,
        rng: &mut R,
    ) -> Result<(f64, DVector<f64>)> {
        self.model.set_hyper_values(theta)?;
        dgp_hyper_grad(&self.model, self.data, self.batch_size, u, rng)
    }
}

fn dgp_hyper_grad<R: Rng + ?Sized>(
    model: &DGPModel,
    data: &Data,
    batch_size: usize,
    u: &FlatLatent,
    rng: &mut R,
) -> Result<(f64, DVector<f64>)> {
    let batch = data.minibatch(batch_size, rng);
    let eps = model.draw_propagation_noise(batch.len(), rng);
    let out = whitened_log_joint_with_noise(u, &batch, model, &eps, Some(GradTarget::Hyperparameters))?;
    Ok((out.value, out.hyper.expect("hyperparameter gradient requested")))
}

/// One ascent step on the log joint of a uniformly drawn window sample.
/// The window is only read.
pub fn mw_mcem_step_with<O: HyperObjective, R: Rng + ?Sized>(
    window: &SampleWindow,
    theta: &mut DVector<f64>,
    opt: &mut OptimizerState,
    objective: &mut O,
    rng: &mut R,
) -> Result<f64> {
    if window.is_empty() {
        return Err(DgpError::InvalidState("moving window is empty".into()));
    }
    let pick = rng.random_range(0..window.len());
    let sample = window.get(pick).expect("index within window");
    let (value, grad) = objective.value_and_grad(theta, sample, rng)?;
    *theta += adaptive_step(opt, &grad)?;
    Ok(value)
}

/// [`mw_mcem_step_with`] on a deep GP, updating `model` in place.
pub fn mw_mcem_step<R: Rng + ?Sized>(
    window: &SampleWindow,
    model: &mut DGPModel,
    opt: &mut OptimizerState,
    data: &Data,
    batch_size: usize,
    rng: &mut R,
) -> Result<f64> {
    if window.is_empty() {
        return Err(DgpError::InvalidState("moving window is empty".into()));
    }
    let pick = rng.random_range(0..window.len());
    let sample = window.get(pick).expect("index within window");
    let (value, grad) = dgp_hyper_grad(model, data, batch_size, sample, rng)?;
    let theta = model.hyper_values() + adaptive_step(opt, &grad)?;
    model.set_hyper_values(&theta)?;
    Ok(value)
}

/// Burn-in hyperparameter schedule for Moving Window MCEM: every chain
/// state enters the window; ascent steps start once the window is full.
#[derive(Debug, Clone)]
pub struct MwMcemStepper {
    pub window: SampleWindow,
    pub opt: OptimizerState,
    pub batch_size: usize,
    pub steps_taken: usize,
}

impl MwMcemStepper {
    pub fn new(model: &DGPModel, capacity: usize, learning_rate: f64, batch_size: usize) -> Result<Self> {
        Ok(MwMcemStepper {
            window: SampleWindow::new(capacity)?,
            opt: OptimizerState::new(model.hyper_len(), learning_rate),
            batch_size,
            steps_taken: 0,
        })
    }
}

impl HyperStepper for MwMcemStepper {
    fn step<R: Rng + ?Sized>(
        &mut self,
        latent: &FlatLatent,
        model: &mut DGPModel,
        data: &Data,
        rng: &mut R,
    ) -> Result<()> {
        self.window.push(latent.clone());
        if self.window.is_full() && self.opt.learning_rate != 0.0 {
            mw_mcem_step(&self.window, model, &mut self.opt, data, self.batch_size, rng)?;
            self.steps_taken += 1;
        }
        Ok(())
    }
}

/// Averages the objective and its gradient over a fixed sample set.
fn average_grad<O: HyperObjective, R: Rng + ?Sized>(
    objective: &mut O,
    theta: &DVector<f64>,
    samples: &[FlatLatent],
    rng: &mut R,
) -> Result<(f64, DVector<f64>)> {
    let mut value = 0.0;
    let mut grad = DVector::zeros(theta.len());
    for u in samples {
        let (v, g) = objective.value_and_grad(theta, u, rng)?;
        value += v;
        grad += g;
    }
    let k = samples.len() as f64;
    Ok((value / k, grad / k))
}

/// Budget of one MCEM run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McemConfig {
    pub set_size: usize,
    /// Ascent steps per M-step.
    pub m_steps: usize,
    pub max_outer: usize,
}

/// Classical MCEM: `e_step` returns `set_size` fresh samples at the current
/// hyperparameters, then `m_steps` ascent steps are taken on their average
/// log joint. Returns the average objective after each M-step.
pub fn mcem_run<O, E, R>(
    theta: &mut DVector<f64>,
    objective: &mut O,
    config: &McemConfig,
    opt: &mut OptimizerState,
    mut e_step: E,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    O: HyperObjective,
    E: FnMut(&mut O, &DVector<f64>, usize, &mut R) -> Result<Vec<FlatLatent>>,
    R: Rng + ?Sized,
{
    if config.set_size == 0 {
        return Err(DgpError::invalid("MCEM needs a set size of at least one"));
    }
    let mut history = Vec::with_capacity(config.max_outer);
    for _ in 0..config.max_outer {
        let samples = e_step(objective, theta, config.set_size, rng)?;
        if samples.len() != config.set_size {
            return Err(DgpError::InvalidState(format!(
                "E-step returned {} samples, expected {}",
                samples.len(),
                config.set_size
            )));
        }
        let mut last = f64::NAN;
        for _ in 0..config.m_steps {
            let (value, grad) = average_grad(objective, theta, &samples, rng)?;
            *theta += adaptive_step(opt, &grad)?;
            last = value;
        }
        history.push(last);
    }
    Ok(history)
}

/// MCEM as the burn-in of an SGHMC chain: each E-step advances the chain by
/// `set_size * thin` steps with auto-tuning and keeps every `thin`-th state.
/// `max_outer` E/M rounds are run; the chain's statistics are frozen after.
#[allow(clippy::too_many_arguments)]
pub fn run_mcem_burn_in<R: Rng + ?Sized>(
    state: &mut SamplerState,
    model: &mut DGPModel,
    data: &Data,
    batch_size: usize,
    config: &McemConfig,
    thin: usize,
    learning_rate: f64,
    rng: &mut R,
    sink: &mut dyn FnMut(&IterationRecord),
) -> Result<()> {
    if thin == 0 {
        return Err(DgpError::invalid("thin must be positive"));
    }
    state.phase = Phase::BurnIn;
    let mut theta = model.hyper_values();
    let mut opt = OptimizerState::new(theta.len(), learning_rate);
    let mut objective = DgpObjective {
        model: model.clone(),
        data,
        batch_size,
    };
    let mut iteration = 0;
    mcem_run(
        &mut theta,
        &mut objective,
        config,
        &mut opt,
        |obj, theta, k, rng| {
            obj.model.set_hyper_values(theta)?;
            let mut samples = Vec::with_capacity(k);
            let mut target = DgpTarget::new(&obj.model, obj.data, obj.batch_size)?;
            for _ in 0..k {
                for _ in 0..thin {
                    let log_joint = iterate(state, &mut target, rng)?;
                    sink(&IterationRecord {
                        iteration,
                        phase: Phase::BurnIn,
                        log_joint,
                        clamp_count: state.clamp_count,
                    });
                    iteration += 1;
                }
                samples.push(state.u.clone());
            }
            Ok(samples)
        },
        rng,
    )?;
    model.set_hyper_values(&theta)?;
    state.freeze();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::standard_normal;
    use crate::model::ModelSpec;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// log p(y, u | θ) = -Σ (θ - u)² / 2
    struct Quadratic;

    impl HyperObjective for Quadratic {
        fn value_and_grad<R: Rng + ?Sized>(
            &mut self,
            theta: &DVector<f64>,
            u: &FlatLatent,
            _: &mut R,
        ) -> Result<(f64, DVector<f64>)> {
            let d = &u.values - theta;
            Ok((-0.5 * d.norm_squared(), d))
        }
    }

    fn flat(v: &[f64]) -> FlatLatent {
        FlatLatent::pack(&[DMatrix::from_column_slice(v.len(), 1, v)])
    }

    #[test]
    fn zero_gradient_gives_zero_update() {
        let mut opt = OptimizerState::new(3, 0.01);
        for _ in 0..10 {
            assert_eq!(adaptive_step(&mut opt, &DVector::zeros(3)).unwrap(), DVector::zeros(3));
        }
    }

    #[test]
    fn constant_gradient_steps_approach_learning_rate() {
        let mut opt = OptimizerState::new(2, 0.01);
        let g = DVector::from_vec(vec![3.0, -0.002]);
        let mut last = DVector::zeros(2);
        for _ in 0..500 {
            last = adaptive_step(&mut opt, &g).unwrap();
        }
        assert!((last[0] - 0.01).abs() < 1e-6);
        assert!((last[1] + 0.01).abs() < 1e-5);
    }

    #[test]
    fn first_step_is_odd_in_gradient() {
        let g = DVector::from_vec(vec![0.5, -2.0]);
        let a = adaptive_step(&mut OptimizerState::new(2, 0.01), &g).unwrap();
        let b = adaptive_step(&mut OptimizerState::new(2, 0.01), &(-&g)).unwrap();
        assert_eq!(a, -b);
    }

    #[test]
    fn empty_window_is_an_error() {
        let w = SampleWindow::new(3).unwrap();
        let mut theta = DVector::zeros(1);
        let mut opt = OptimizerState::new(1, 0.01);
        let err = mw_mcem_step_with(&w, &mut theta, &mut opt, &mut Quadratic, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(DgpError::InvalidState(_))));
    }

    #[test]
    fn identical_window_equals_plain_step() {
        let sample = flat(&[1.5, -0.5]);
        let w = SampleWindow::from_samples(vec![sample.clone(); 4]).unwrap();
        let mut theta = DVector::from_vec(vec![0.2, 0.3]);
        let mut opt = OptimizerState::new(2, 0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        mw_mcem_step_with(&w, &mut theta, &mut opt, &mut Quadratic, &mut rng).unwrap();
        let mut plain = DVector::from_vec(vec![0.2, 0.3]);
        let (_, g) = Quadratic.value_and_grad(&plain, &sample, &mut rng).unwrap();
        plain += adaptive_step(&mut OptimizerState::new(2, 0.01), &g).unwrap();
        assert_eq!(theta, plain);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let w = SampleWindow::from_samples(vec![flat(&[1.0]), flat(&[2.0])]).unwrap();
        let mut theta = DVector::from_element(1, 0.7);
        let mut opt = OptimizerState::new(1, 0.0);
        let before = w.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            mw_mcem_step_with(&w, &mut theta, &mut opt, &mut Quadratic, &mut rng).unwrap();
        }
        assert_eq!(theta[0], 0.7);
        assert_eq!(w, before);
    }

    #[test]
    fn moving_window_converges_to_sample_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<FlatLatent> = (0..50).map(|_| flat(&[rng.random_range(0.5..1.5)])).collect();
        let mean = samples.iter().map(|u| u.values[0]).sum::<f64>() / 50.0;
        let w = SampleWindow::from_samples(samples).unwrap();
        let mut theta = DVector::from_element(1, -4.0);
        let mut opt = OptimizerState::new(1, 0.01);
        // constant-rate Adam keeps jittering at the optimum; average the tail
        let mut tail = 0.0;
        for k in 0..5000 {
            mw_mcem_step_with(&w, &mut theta, &mut opt, &mut Quadratic, &mut rng).unwrap();
            if k >= 4000 {
                tail += theta[0] / 1000.0;
            }
        }
        assert!((tail - mean).abs() < 0.05, "{tail} vs {mean}");
    }

    #[test]
    fn expected_direction_is_average_gradient() {
        let samples = vec![flat(&[1.0]), flat(&[-2.0]), flat(&[4.0]), flat(&[0.5])];
        let w = SampleWindow::from_samples(samples.clone()).unwrap();
        let theta = DVector::from_element(1, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = 10_000;
        let grads: Vec<f64> = (0..draws)
            .map(|_| {
                let u = w.get(rng.random_range(0..w.len())).unwrap();
                Quadratic.value_and_grad(&theta, u, &mut rng).unwrap().1[0]
            })
            .collect();
        let m = grads.iter().sum::<f64>() / draws as f64;
        let sd = (grads.iter().map(|g| (g - m).powi(2)).sum::<f64>() / (draws - 1) as f64).sqrt();
        let exact = average_grad(&mut Quadratic, &theta, &samples, &mut rng).unwrap().1[0];
        assert!((m - exact).abs() < 3.0 * sd / (draws as f64).sqrt());
    }

    #[test]
    fn mcem_converges_to_e_step_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut theta = DVector::from_element(1, 5.0);
        let mut opt = OptimizerState::new(1, 0.01);
        let config = McemConfig { set_size: 10, m_steps: 200, max_outer: 30 };
        let mut last_mean = 0.0;
        mcem_run(
            &mut theta,
            &mut Quadratic,
            &config,
            &mut opt,
            |_, _, k, rng| {
                let s: Vec<FlatLatent> = (0..k).map(|_| flat(&[1.0 + rng.random_range(-0.5..0.5)])).collect();
                last_mean = s.iter().map(|u| u.values[0]).sum::<f64>() / k as f64;
                Ok(s)
            },
            &mut rng,
        )
        .unwrap();
        assert!((theta[0] - last_mean).abs() < 0.05, "{} vs {last_mean}", theta[0]);
    }

    #[test]
    fn m_step_on_frozen_samples_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples = vec![flat(&[1.0, 0.0]), flat(&[2.0, -1.0]), flat(&[0.0, 3.0])];
        let mut theta = DVector::from_vec(vec![-3.0, 4.0]);
        let mut opt = OptimizerState::new(2, 0.01);
        let mut prev = f64::NEG_INFINITY;
        for _ in 0..300 {
            let (value, grad) = average_grad(&mut Quadratic, &theta, &samples, &mut rng).unwrap();
            assert!(value >= prev - 1e-12);
            prev = value;
            theta += adaptive_step(&mut opt, &grad).unwrap();
        }
    }

    #[test]
    fn minimal_mcem_is_one_coupled_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut theta = DVector::from_element(1, 0.0);
        let mut opt = OptimizerState::new(1, 0.01);
        let config = McemConfig { set_size: 1, m_steps: 1, max_outer: 1 };
        mcem_run(&mut theta, &mut Quadratic, &config, &mut opt, |_, _, _, _| Ok(vec![flat(&[2.0])]), &mut rng)
            .unwrap();
        assert!((theta[0] - 0.01).abs() < 1e-9);
        let zero = McemConfig { set_size: 0, ..config };
        assert!(mcem_run(&mut theta, &mut Quadratic, &zero, &mut opt, |_, _, _, _| Ok(vec![]), &mut rng).is_err());
    }

    fn small_dgp(rng: &mut ChaCha8Rng) -> (DGPModel, Data) {
        let x = standard_normal(rng, 30, 1);
        let y = x.map(|v| (2.0 * v).sin());
        let data = Data::new(x, y).unwrap();
        let spec = ModelSpec { hidden_widths: vec![1], num_inducing: 8, ..Default::default() };
        (DGPModel::build(&data, &spec, rng).unwrap(), data)
    }

    #[test]
    fn hyper_vector_layout_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (mut model, _) = small_dgp(&mut rng);
        let mut hv = HyperVector::pack(&model);
        assert_eq!(hv.values.len(), model.hyper_len());
        assert_eq!(hv.block(None, HyperKind::LogNoiseVariance).unwrap(), &[model.log_noise_variance]);
        assert_eq!(hv.block(Some(1), HyperKind::InducingInputs).unwrap(), model.layers[1].z.as_slice());
        hv.values[0] = 0.42;
        hv.unpack_into(&mut model).unwrap();
        assert_eq!(model.layers[0].kernel.log_lengthscales[0], 0.42);
        assert_eq!(HyperVector::pack(&model), hv);
    }

    #[test]
    fn dgp_step_with_dgp_objective_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (model, data) = small_dgp(&mut rng);
        let w = SampleWindow::from_samples(vec![FlatLatent::from_model(&model)]).unwrap();
        let mut a = model.clone();
        let mut opt_a = OptimizerState::new(model.hyper_len(), 0.01);
        mw_mcem_step(&w, &mut a, &mut opt_a, &data, 10, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut theta = model.hyper_values();
        let mut opt_b = OptimizerState::new(model.hyper_len(), 0.01);
        let mut obj = DgpObjective { model: model.clone(), data: &data, batch_size: 10 };
        mw_mcem_step_with(&w, &mut theta, &mut opt_b, &mut obj, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.hyper_values(), theta);
        assert_ne!(theta, model.hyper_values());
    }

    #[test]
    fn stepper_waits_for_full_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (mut model, data) = small_dgp(&mut rng);
        let start = model.clone();
        let mut stepper = MwMcemStepper::new(&model, 5, 0.01, 30).unwrap();
        let state = SamplerState::init_from_prior(&model, &Default::default(), &mut rng).unwrap();
        for k in 0..4 {
            stepper.step(&state.u, &mut model, &data, &mut rng).unwrap();
            assert_eq!(stepper.window.len(), k + 1);
        }
        assert_eq!(model, start);
        stepper.step(&state.u, &mut model, &data, &mut rng).unwrap();
        assert_eq!(stepper.steps_taken, 1);
        assert_ne!(model, start);
    }

    #[test]
    fn mcem_burn_in_runs_and_freezes() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (mut model, data) = small_dgp(&mut rng);
        let mut state = SamplerState::init_from_prior(&model, &Default::default(), &mut rng).unwrap();
        let config = McemConfig { set_size: 2, m_steps: 3, max_outer: 2 };
        let mut count = 0;
        run_mcem_burn_in(&mut state, &mut model, &data, 30, &config, 5, 0.01, &mut rng, &mut |_| count += 1).unwrap();
        assert_eq!(count, 20);
        assert_eq!(state.phase, Phase::Sampling);
    }
}
