//! Seven-point, two-layer toy problem whose posterior has two mirror-image
//! modes.
//!
//! Both layers have zero mean functions and the second layer's inducing
//! inputs are symmetric about zero, so the joint density is exactly
//! invariant under `u₁ ↦ -u₁` together with reversing `u₂`. The targets are
//! monotone but not even, so the first layer cannot collapse onto a
//! symmetric solution: one mode has `f₁` increasing, its mirror decreasing.

use deepgp::diagnostics::bimodality_coverage;
use deepgp::dsvi::{dsvi_train, sample_coupled_latent, CoupledVarParams, DsviConfig, VarParams};
use deepgp::error::Result;
use deepgp::kernel::KernelParams;
use deepgp::layer::{standard_normal, LayerState, MeanFnSpec};
use deepgp::mcem::{adaptive_step, OptimizerState};
use deepgp::model::{log_joint_with_noise, Data, DGPModel, FlatLatent, GradTarget};
use deepgp::sghmc::{run_burn_in, run_sampling, NoHyperStep, SampleWindow, SamplerConfig, SamplerState};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Budgets for the bimodality experiment. Hyperparameters stay fixed so the
/// mirror symmetry is exact throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyRunConfig {
    pub burn_in: usize,
    pub samples: usize,
    pub thin: usize,
    pub dsvi_iterations: usize,
    /// Draws from the fitted variational posterior used for coverage.
    pub dsvi_draws: usize,
}

impl Default for ToyRunConfig {
    fn default() -> Self {
        ToyRunConfig { burn_in: 20_000, samples: 10_000, thin: 50, dsvi_iterations: 5000, dsvi_draws: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    pub noise_variance: f64,
    pub lengthscales: [f64; 2],
    pub signal_variances: [f64; 2],
    /// Half-width of the second layer's inducing grid.
    ///
    /// The first layer's inducing inputs are the seven data inputs; with a
    /// lengthscale near their spacing the prior on `u₁` gets stiff enough to
    /// blow up the sampler, hence the 0.5 default.
    pub z2_extent: f64,
    pub z2_count: usize,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            noise_variance: 0.6,
            lengthscales: [0.5, 1.0],
            signal_variances: [1.0, 1.0],
            z2_extent: 2.0,
            z2_count: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyProblem {
    pub data: Data,
    pub model: DGPModel,
}

pub fn toy_inputs() -> DMatrix<f64> {
    DMatrix::from_fn(7, 1, |i, _| -1.5 + 0.5 * i as f64)
}

pub fn toy_targets() -> DMatrix<f64> {
    DMatrix::from_column_slice(7, 1, &[-1.0, -1.0, -0.9, 0.0, 0.9, 1.0, 1.0])
}

pub fn toy_problem(spec: &ToySpec) -> Result<ToyProblem> {
    let x = toy_inputs();
    let data = Data::new(x.clone(), toy_targets())?;
    let n2 = spec.z2_count;
    let z2 = DMatrix::from_fn(n2, 1, |i, _| {
        -spec.z2_extent + 2.0 * spec.z2_extent * i as f64 / (n2 - 1) as f64
    });
    let l1 = LayerState::new(
        x.clone(),
        DMatrix::zeros(7, 1),
        KernelParams::new(&[spec.lengthscales[0]], spec.signal_variances[0])?,
        MeanFnSpec::zero(),
    )?;
    let l2 = LayerState::new(
        z2,
        DMatrix::zeros(n2, 1),
        KernelParams::new(&[spec.lengthscales[1]], spec.signal_variances[1])?,
        MeanFnSpec::zero(),
    )?;
    let model = DGPModel::new(vec![l1, l2], spec.noise_variance.ln(), 7)?;
    Ok(ToyProblem { data, model })
}

impl ToyProblem {
    /// Image of a latent under the exact symmetry of the joint density.
    pub fn mirror(&self, latent: &FlatLatent) -> FlatLatent {
        let mut blocks = latent.unpack();
        blocks[0] = -&blocks[0];
        let n = blocks[1].nrows();
        let reversed = DMatrix::from_fn(n, 1, |i, _| blocks[1][(n - 1 - i, 0)]);
        blocks[1] = reversed;
        FlatLatent::pack(&blocks)
    }

    /// Ascends the log joint with the propagation noise switched off,
    /// starting from `f₁ = sign · x` and `u₂ = 0`.
    pub fn find_mode(&self, sign: f64, iterations: usize) -> Result<FlatLatent> {
        let blocks = vec![
            self.model.layers[0].z.clone() * sign,
            DMatrix::zeros(self.model.layers[1].num_inducing(), 1),
        ];
        let mut latent = FlatLatent::pack(&blocks);
        let zeros: Vec<DMatrix<f64>> = self
            .model
            .layers
            .iter()
            .map(|l| DMatrix::zeros(self.data.len(), l.output_dim()))
            .collect();
        let mut opt = OptimizerState::new(latent.len(), 0.01);
        for _ in 0..iterations {
            let g = log_joint_with_noise(&latent, &self.data, &self.model, &zeros, Some(GradTarget::Latent))?;
            let step = adaptive_step(&mut opt, &g.latent.expect("latent gradient"))?;
            latent.values += step;
        }
        Ok(latent)
    }

    /// Mode A, its mirror image (mode B) and the direction A - B.
    pub fn modes(&self) -> Result<(FlatLatent, FlatLatent, DVector<f64>)> {
        let a = self.find_mode(1.0, 5000)?;
        let b = self.mirror(&a);
        let d = &a.values - &b.values;
        Ok((a, b, d))
    }
}

impl ToyProblem {
    /// Runs SGHMC from a prior draw and returns the fractions of retained
    /// samples on either side of the mode-difference direction.
    pub fn sghmc_coverage(&self, direction: &DVector<f64>, config: &ToyRunConfig, seed: u64) -> Result<(f64, f64)> {
        let window = self.sghmc_window(config, seed)?;
        bimodality_coverage(&window, direction)
    }

    pub fn sghmc_window(&self, config: &ToyRunConfig, seed: u64) -> Result<SampleWindow> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.data.len();
        let mut state = SamplerState::init_from_prior(&self.model, &SamplerConfig::default(), &mut rng)?;
        let mut model = self.model.clone();
        run_burn_in(&mut state, &mut model, &self.data, n, config.burn_in, &mut rng, &mut NoHyperStep, &mut |_| {})?;
        run_sampling(&mut state, &model, &self.data, n, config.samples, config.thin, &mut rng, &mut |_| {})
    }

    /// Fits a coupled DSVI posterior from a random mean initialization and
    /// reports coverage of draws from it.
    pub fn dsvi_coverage(&self, direction: &DVector<f64>, config: &ToyRunConfig, seed: u64) -> Result<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = self.model.clone();
        let mut params = CoupledVarParams::init(&model)?;
        for layer in &mut params.layers {
            layer.m = standard_normal(&mut rng, layer.m.nrows(), layer.m.ncols());
        }
        let mut vp = VarParams::Coupled(params);
        let dsvi = DsviConfig {
            iterations: config.dsvi_iterations,
            batch_size: self.data.len(),
            fix_hyperparameters: true,
            ..Default::default()
        };
        dsvi_train(&self.data, &mut model, &mut vp, &dsvi, &mut rng, &mut |_| {})?;
        let VarParams::Coupled(params) = vp else { unreachable!("family is preserved by training") };
        let draws = (0..config.dsvi_draws).map(|_| sample_coupled_latent(&params, &mut rng)).collect();
        bimodality_coverage(&SampleWindow::from_samples(draws)?, direction)
    }
}
