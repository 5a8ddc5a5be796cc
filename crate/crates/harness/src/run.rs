//! Training, prediction and evaluation for every method.

use crate::config::{ExperimentConfig, HyperOptimizer, Method};
use crate::data::{normalize, split, Dataset, Normalization};
use crate::error::{HarnessError, Result};
use deepgp::dsvi::{dsvi_predict, CoupledVarParams, DecoupledVarParams, DsviConfig, DsviTrainer, VarParams};
use deepgp::mcem::{run_mcem_burn_in, McemConfig, MwMcemStepper};
use deepgp::model::{mixture_mll, predict_mixture, DGPModel, Data, ModelSpec, PredictiveMixture};
use deepgp::sghmc::{iterate, run_sampling, DgpTarget, HyperStepper, Phase, SampleWindow, SamplerConfig, SamplerState, Whitener};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Upper bound on the number of per-iteration diagnostics kept per phase.
const MAX_TRACE_POINTS: usize = 1000;

const TRAIN_STREAM: u64 = 1;
const PREDICT_STREAM: u64 = 2;

/// One row of a convergence table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub method: String,
    pub iteration: usize,
    pub wall_clock_s: f64,
    pub metric_name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Posterior {
    Samples(SampleWindow),
    Variational(VarParams),
}

/// Everything needed to predict: the configuration it was trained with,
/// fitted hyperparameters, the posterior and the data normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub config: ExperimentConfig,
    pub input_dim: usize,
    pub output_dim: usize,
    pub model: DGPModel,
    pub posterior: Posterior,
    pub normalization: Normalization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTime {
    pub phase: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub dataset: String,
    pub num_train: usize,
    pub num_test: usize,
    pub curves: Vec<CurvePoint>,
    /// Mean test log predictive density in original target units.
    pub test_mll: f64,
    pub test_rmse: f64,
    pub phase_times: Vec<PhaseTime>,
    pub artifacts: Vec<String>,
    /// Set when the run failed; the metrics are then NaN.
    pub error: Option<String>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn model_spec(config: &ExperimentConfig) -> ModelSpec {
    ModelSpec {
        hidden_widths: vec![config.hidden_width; config.depth()],
        // the decoupled families carry their own inducing sets
        num_inducing: if config.method.is_decoupled() { config.m_b } else { config.num_inducing },
        noise_variance: config.initial_noise_variance,
        ..ModelSpec::default()
    }
}

struct Tracer<'a> {
    method: String,
    start: Instant,
    stride: usize,
    points: &'a mut Vec<CurvePoint>,
}

impl Tracer<'_> {
    fn push(&mut self, iteration: usize, metric: &str, value: f64) {
        self.points.push(CurvePoint {
            method: self.method.clone(),
            iteration,
            wall_clock_s: self.start.elapsed().as_secs_f64(),
            metric_name: metric.to_string(),
            value,
        });
    }

    fn trace(&mut self, iteration: usize, metric: &str, value: f64) {
        if iteration.is_multiple_of(self.stride) {
            self.push(iteration, metric, value);
        }
    }
}

/// Test-set evaluation during training, when a test set is supplied and
/// `eval_every > 0`.
struct Evaluator<'a> {
    test: Option<&'a Dataset>,
    every: usize,
    seed: u64,
}

impl Evaluator<'_> {
    fn due(&self, iteration: usize) -> bool {
        self.test.is_some() && self.every > 0 && (iteration + 1).is_multiple_of(self.every)
    }
}

/// Trains `config.method` on `train` (already normalized). Per-iteration
/// diagnostics and, if requested, test MLL checkpoints go to `curves`.
pub fn train(
    config: &ExperimentConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    curves: &mut Vec<CurvePoint>,
    phase_times: &mut Vec<PhaseTime>,
) -> Result<TrainedModel> {
    config.validate()?;
    let data = train.to_data()?;
    let mut rng = stream_rng(config.seed, TRAIN_STREAM);
    let mut model = DGPModel::build(&data, &model_spec(config), &mut rng)?;
    let eval = Evaluator { test, every: config.eval_every, seed: config.seed };
    let posterior = match config.method {
        Method::SghmcDgp => Posterior::Samples(train_sghmc(config, &data, &mut model, &eval, &mut rng, curves, phase_times)?),
        _ => Posterior::Variational(train_dsvi(config, &data, &mut model, &eval, &mut rng, curves, phase_times)?),
    };
    Ok(TrainedModel {
        config: config.clone(),
        input_dim: train.num_features(),
        output_dim: train.num_targets(),
        model,
        posterior,
        normalization: train.normalization.clone(),
    })
}

fn train_sghmc(
    config: &ExperimentConfig,
    data: &Data,
    model: &mut DGPModel,
    eval: &Evaluator<'_>,
    rng: &mut ChaCha8Rng,
    curves: &mut Vec<CurvePoint>,
    phase_times: &mut Vec<PhaseTime>,
) -> Result<SampleWindow> {
    let sampler = SamplerConfig { batch_size: config.batch_size, ..SamplerConfig::default() };
    let mut state = SamplerState::init_from_prior(model, &sampler, rng)?;
    let batch = config.batch_size;
    let start = Instant::now();
    let mut tracer = Tracer {
        method: config.method.to_string(),
        start,
        stride: (config.burn_in / MAX_TRACE_POINTS).max(1),
        points: curves,
    };
    match config.hyper_optimizer {
        HyperOptimizer::MwMcem => {
            let mut stepper = MwMcemStepper::new(model, config.window_capacity, config.learning_rate, batch)?;
            state.phase = Phase::BurnIn;
            for it in 0..config.burn_in {
                let lj = {
                    let mut target = DgpTarget::new(model, data, batch)?;
                    iterate(&mut state, &mut target, rng)?
                };
                stepper.step(&state.u, model, data, rng)?;
                tracer.trace(it, "log_joint", lj);
                if eval.due(it) {
                    let test = eval.test.expect("due implies a test set");
                    let mut prng = stream_rng(eval.seed, PREDICT_STREAM);
                    let whitener = Whitener::new(model)?;
                    let mut window = SampleWindow::new(stepper.window.capacity())?;
                    for v in stepper.window.iter() {
                        window.push(whitener.latent(v));
                    }
                    let mixture = predict_mixture(&test.x, &window, model, &mut prng)?;
                    let (mll, _) = evaluate_mixture(&mixture, &test.original_y(), &test.normalization)?;
                    tracer.push(it, "test_mll", mll);
                }
            }
            state.freeze();
        }
        HyperOptimizer::Mcem => {
            let per_round = config.mcem_set_size * config.mcem_thin;
            let mcem = McemConfig {
                set_size: config.mcem_set_size,
                m_steps: per_round,
                max_outer: (config.burn_in / per_round).max(1),
            };
            run_mcem_burn_in(&mut state, model, data, batch, &mcem, config.mcem_thin, config.learning_rate, rng, &mut |r| {
                tracer.trace(r.iteration, "log_joint", r.log_joint)
            })?;
        }
    }
    phase_times.push(PhaseTime { phase: "burn_in".into(), seconds: start.elapsed().as_secs_f64() });
    let start = Instant::now();
    let offset = config.burn_in;
    tracer.stride = (config.sampling_iterations / MAX_TRACE_POINTS).max(1);
    let window = run_sampling(&mut state, model, data, batch, config.num_samples(), config.thin, rng, &mut |r| {
        tracer.trace(offset + r.iteration, "log_joint", r.log_joint)
    })?;
    phase_times.push(PhaseTime { phase: "sampling".into(), seconds: start.elapsed().as_secs_f64() });
    Ok(window)
}

fn train_dsvi(
    config: &ExperimentConfig,
    data: &Data,
    model: &mut DGPModel,
    eval: &Evaluator<'_>,
    rng: &mut ChaCha8Rng,
    curves: &mut Vec<CurvePoint>,
    phase_times: &mut Vec<PhaseTime>,
) -> Result<VarParams> {
    let mut vp = if config.method.is_decoupled() {
        VarParams::Decoupled(DecoupledVarParams::init(model, &data.x, config.m_a, config.m_b, config.decoupled_mean, rng)?)
    } else {
        VarParams::Coupled(CoupledVarParams::init(model)?)
    };
    let dsvi = DsviConfig {
        iterations: config.dsvi_iterations,
        learning_rate: config.learning_rate,
        batch_size: config.batch_size,
        ..DsviConfig::default()
    };
    let start = Instant::now();
    let mut tracer = Tracer {
        method: config.method.to_string(),
        start,
        stride: (config.dsvi_iterations / MAX_TRACE_POINTS).max(1),
        points: curves,
    };
    let mut trainer = DsviTrainer::new(model, &vp, &dsvi)?;
    for it in 0..config.dsvi_iterations {
        let record = trainer.step(data, model, &mut vp, rng)?;
        tracer.trace(it, "elbo", record.elbo);
        if eval.due(it) {
            let test = eval.test.expect("due implies a test set");
            let mut prng = stream_rng(eval.seed, PREDICT_STREAM);
            let mixture = dsvi_predict(&test.x, model, &vp, config.predict_samples, &mut prng)?;
            let (mll, _) = evaluate_mixture(&mixture, &test.original_y(), &test.normalization)?;
            tracer.push(it, "test_mll", mll);
        }
    }
    phase_times.push(PhaseTime { phase: "training".into(), seconds: start.elapsed().as_secs_f64() });
    Ok(vp)
}

impl TrainedModel {
    /// Predictive mixture in normalized units for normalized inputs. Uses a
    /// fixed random stream so repeated calls agree exactly.
    pub fn predict(&self, x_star: &DMatrix<f64>) -> Result<PredictiveMixture> {
        if x_star.ncols() != self.input_dim {
            return Err(HarnessError::invalid(format!(
                "inputs have {} columns, model expects {}",
                x_star.ncols(),
                self.input_dim
            )));
        }
        let mut rng = stream_rng(self.config.seed, PREDICT_STREAM);
        let mixture = match &self.posterior {
            Posterior::Samples(window) => predict_mixture(x_star, window, &self.model, &mut rng)?,
            Posterior::Variational(vp) => dsvi_predict(x_star, &self.model, vp, self.config.predict_samples, &mut rng)?,
        };
        Ok(mixture)
    }

    /// Test MLL and RMSE in original units for a dataset in this model's
    /// normalized units.
    pub fn evaluate(&self, test: &Dataset) -> Result<(f64, f64)> {
        let mixture = self.predict(&test.x)?;
        evaluate_mixture(&mixture, &test.original_y(), &self.normalization)
    }
}

/// Maps a normalized-unit mixture back to original units and scores it:
/// mean log mixture density per test point and RMSE of the mixture mean.
pub fn evaluate_mixture(
    mixture: &PredictiveMixture,
    y_original: &DMatrix<f64>,
    normalization: &Normalization,
) -> Result<(f64, f64)> {
    let components = mixture
        .components
        .iter()
        .map(|(m, v)| (normalization.invert_y(m), normalization.invert_y_var(v)))
        .collect();
    let original = PredictiveMixture::new(components)?;
    if original.components[0].0.shape() != y_original.shape() {
        return Err(HarnessError::invalid("test targets do not match the predictive shape"));
    }
    let mll = mixture_mll(&original, y_original)?;
    let resid = original.mean() - y_original;
    let rmse = (resid.norm_squared() / resid.len() as f64).sqrt();
    Ok((mll, rmse))
}

/// Split, normalize on the training side, train, and score on the test side.
pub fn run_experiment(config: &ExperimentConfig, dataset: &Dataset) -> Result<(RunRecord, TrainedModel)> {
    config.validate()?;
    let (train_raw, test_raw) = split(dataset, config.train_fraction, config.seed, config.split_mode)?;
    let (train_set, test_set) = normalize(&train_raw, &test_raw);
    let mut curves = Vec::new();
    let mut phase_times = Vec::new();
    let trained = train(config, &train_set, Some(&test_set), &mut curves, &mut phase_times)?;
    let start = Instant::now();
    let (test_mll, test_rmse) = trained.evaluate(&test_set)?;
    phase_times.push(PhaseTime { phase: "evaluate".into(), seconds: start.elapsed().as_secs_f64() });
    let record = RunRecord {
        config: config.clone(),
        dataset: dataset.name.clone(),
        num_train: train_set.len(),
        num_test: test_set.len(),
        curves,
        test_mll,
        test_rmse,
        phase_times,
        artifacts: Vec::new(),
        error: None,
    };
    Ok((record, trained))
}

/// Like [`run_experiment`] but a failure becomes a record with NaN metrics.
pub fn run_recorded(config: &ExperimentConfig, dataset: &Dataset) -> (RunRecord, Option<TrainedModel>) {
    match run_experiment(config, dataset) {
        Ok((record, trained)) => (record, Some(trained)),
        Err(e) => (
            RunRecord {
                config: config.clone(),
                dataset: dataset.name.clone(),
                num_train: 0,
                num_test: 0,
                curves: Vec::new(),
                test_mll: f64::NAN,
                test_rmse: f64::NAN,
                phase_times: Vec::new(),
                artifacts: Vec::new(),
                error: Some(e.machine_line()),
            },
            None,
        ),
    }
}
