//! Experiment configuration as `key = value` text.
//!
//! Blank lines and lines starting with `#` are skipped. Every field of
//! [`ExperimentConfig`] is addressable by its name; unknown keys are errors.

use crate::data::SplitMode;
use crate::error::{HarnessError, Result};
use deepgp::dsvi::MeanParameterization;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

pub const MAX_HIDDEN_LAYERS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SghmcDgp,
    DsviDgp,
    DsviDgpDecoupled,
    Sgp,
    DecSgp,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::SghmcDgp, Method::DsviDgp, Method::DsviDgpDecoupled, Method::Sgp, Method::DecSgp];

    pub fn name(self) -> &'static str {
        match self {
            Method::SghmcDgp => "sghmc_dgp",
            Method::DsviDgp => "dsvi_dgp",
            Method::DsviDgpDecoupled => "dsvi_dgp_decoupled",
            Method::Sgp => "sgp",
            Method::DecSgp => "dec_sgp",
        }
    }

    pub fn is_decoupled(self) -> bool {
        matches!(self, Method::DsviDgpDecoupled | Method::DecSgp)
    }

    /// Single-layer baselines.
    pub fn is_shallow(self) -> bool {
        matches!(self, Method::Sgp | Method::DecSgp)
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method `{s}`"))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How the sampler's burn-in sets the model hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperOptimizer {
    MwMcem,
    Mcem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub method: Method,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub num_inducing: usize,
    /// Decoupled mean inducing set size.
    pub m_a: usize,
    /// Decoupled covariance inducing set size.
    pub m_b: usize,
    pub decoupled_mean: MeanParameterization,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub burn_in: usize,
    pub sampling_iterations: usize,
    pub thin: usize,
    pub window_capacity: usize,
    pub hyper_optimizer: HyperOptimizer,
    pub mcem_set_size: usize,
    /// Sampler steps between retained MCEM samples.
    pub mcem_thin: usize,
    pub dsvi_iterations: usize,
    /// Propagated samples in the DSVI predictive mixture.
    pub predict_samples: usize,
    pub initial_noise_variance: f64,
    pub train_fraction: f64,
    pub split_mode: SplitMode,
    pub target_columns: Vec<String>,
    pub repetitions: usize,
    pub seed: u64,
    /// Iterations between test-set evaluations written to the curves table;
    /// 0 disables them.
    pub eval_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::SghmcDgp,
            hidden_layers: 1,
            hidden_width: 10,
            num_inducing: 100,
            m_a: 300,
            m_b: 50,
            decoupled_mean: MeanParameterization::Cb,
            learning_rate: 0.01,
            batch_size: 10_000,
            burn_in: 20_000,
            sampling_iterations: 10_000,
            thin: 50,
            window_capacity: 300,
            hyper_optimizer: HyperOptimizer::MwMcem,
            mcem_set_size: 10,
            mcem_thin: 50,
            dsvi_iterations: 20_000,
            predict_samples: 200,
            initial_noise_variance: 0.1,
            train_fraction: 0.8,
            split_mode: SplitMode::Random,
            target_columns: vec!["y".into()],
            repetitions: 10,
            seed: 0,
            eval_every: 0,
        }
    }
}

const KEYS: [&str; 26] = [
    "method",
    "hidden_layers",
    "hidden_width",
    "num_inducing",
    "m_a",
    "m_b",
    "decoupled_mean",
    "learning_rate",
    "batch_size",
    "burn_in",
    "sampling_iterations",
    "thin",
    "window_capacity",
    "hyper_optimizer",
    "mcem_set_size",
    "mcem_thin",
    "dsvi_iterations",
    "predict_samples",
    "initial_noise_variance",
    "train_fraction",
    "split_mode",
    "target_columns",
    "repetitions",
    "seed",
    "eval_every",
    // preset switch, see `apply_desk_scale`
    "desk_scale",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| HarnessError::config(key, format!("`{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(HarnessError::config(key, format!("`{value}` is not a boolean"))),
    }
}

impl ExperimentConfig {
    /// Scaled-down budgets for quick runs: burn-in 2000, sampling 1000 at
    /// thin 10 (100 samples), 2000 DSVI iterations, 100 predictive samples,
    /// 5 repetitions.
    pub fn apply_desk_scale(&mut self) {
        self.burn_in = 2000;
        self.sampling_iterations = 1000;
        self.thin = 10;
        self.dsvi_iterations = 2000;
        self.predict_samples = 100;
        self.repetitions = 5;
    }

    pub fn desk_scale() -> Self {
        let mut c = ExperimentConfig::default();
        c.apply_desk_scale();
        c
    }

    pub fn num_samples(&self) -> usize {
        self.sampling_iterations / self.thin.max(1)
    }

    /// Effective number of hidden layers; the shallow baselines have none.
    pub fn depth(&self) -> usize {
        if self.method.is_shallow() {
            0
        } else {
            self.hidden_layers
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "method" => self.method = value.parse().map_err(|e: String| HarnessError::config(key, e))?,
            "hidden_layers" => self.hidden_layers = parse_num(key, value)?,
            "hidden_width" => self.hidden_width = parse_num(key, value)?,
            "num_inducing" => self.num_inducing = parse_num(key, value)?,
            "m_a" => self.m_a = parse_num(key, value)?,
            "m_b" => self.m_b = parse_num(key, value)?,
            "decoupled_mean" => {
                self.decoupled_mean = match value {
                    "cb" => MeanParameterization::Cb,
                    "gp" => MeanParameterization::Gp,
                    "gp_cent" => MeanParameterization::GpCent,
                    _ => return Err(HarnessError::config(key, format!("unknown mean parameterization `{value}`"))),
                }
            }
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "burn_in" => self.burn_in = parse_num(key, value)?,
            "sampling_iterations" => self.sampling_iterations = parse_num(key, value)?,
            "thin" => self.thin = parse_num(key, value)?,
            "window_capacity" => self.window_capacity = parse_num(key, value)?,
            "hyper_optimizer" => {
                self.hyper_optimizer = match value {
                    "mw_mcem" => HyperOptimizer::MwMcem,
                    "mcem" => HyperOptimizer::Mcem,
                    _ => return Err(HarnessError::config(key, format!("unknown optimizer `{value}`"))),
                }
            }
            "mcem_set_size" => self.mcem_set_size = parse_num(key, value)?,
            "mcem_thin" => self.mcem_thin = parse_num(key, value)?,
            "dsvi_iterations" => self.dsvi_iterations = parse_num(key, value)?,
            "predict_samples" => self.predict_samples = parse_num(key, value)?,
            "initial_noise_variance" => self.initial_noise_variance = parse_num(key, value)?,
            "train_fraction" => self.train_fraction = parse_num(key, value)?,
            "split_mode" => {
                self.split_mode = match value {
                    "random" => SplitMode::Random,
                    "fixed" => SplitMode::Fixed,
                    _ => return Err(HarnessError::config(key, format!("unknown split mode `{value}`"))),
                }
            }
            "target_columns" => {
                self.target_columns = value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
            }
            "repetitions" => self.repetitions = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "eval_every" => self.eval_every = parse_num(key, value)?,
            "desk_scale" => {
                if parse_bool(key, value)? {
                    self.apply_desk_scale();
                }
            }
            _ => return Err(HarnessError::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`, in order.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                HarnessError::config(line, format!("line {} is not `key = value`", n + 1))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Override of the form `key=value`.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| HarnessError::config(assignment, "override is not `key=value`"))?;
        self.set(key.trim(), value)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, msg: &str| Err(HarnessError::config(key, msg));
        if self.hidden_layers > MAX_HIDDEN_LAYERS {
            return err("hidden_layers", "at most 4 hidden layers are supported");
        }
        if self.method.is_shallow() && self.hidden_layers != 0 {
            return err("hidden_layers", "single-layer baselines take hidden_layers = 0");
        }
        if self.hidden_width == 0 {
            return err("hidden_width", "must be positive");
        }
        if self.method.is_decoupled() {
            if self.m_a == 0 || self.m_b == 0 {
                return err("m_a", "decoupled methods need m_a > 0 and m_b > 0");
            }
        } else if self.num_inducing == 0 {
            return err("num_inducing", "must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return err("learning_rate", "must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be positive");
        }
        if self.method == Method::SghmcDgp {
            if self.burn_in == 0 {
                return err("burn_in", "must be positive");
            }
            if self.thin == 0 {
                return err("thin", "must be positive");
            }
            if self.num_samples() == 0 {
                return err("sampling_iterations", "must be at least `thin`");
            }
            if self.window_capacity == 0 {
                return err("window_capacity", "must be positive");
            }
            if self.hyper_optimizer == HyperOptimizer::Mcem && (self.mcem_set_size == 0 || self.mcem_thin == 0) {
                return err("mcem_set_size", "MCEM needs positive set size and thinning");
            }
        } else if self.dsvi_iterations == 0 {
            return err("dsvi_iterations", "must be positive");
        }
        if self.predict_samples == 0 {
            return err("predict_samples", "must be positive");
        }
        if !(self.initial_noise_variance > 0.0 && self.initial_noise_variance.is_finite()) {
            return err("initial_noise_variance", "must be positive");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return err("train_fraction", "must lie in (0, 1)");
        }
        if self.target_columns.is_empty() {
            return err("target_columns", "at least one target column is required");
        }
        if self.repetitions == 0 {
            return err("repetitions", "must be positive");
        }
        Ok(())
    }

    /// `key = value` text that [`ExperimentConfig::parse`] maps back to
    /// `self`.
    pub fn to_text(&self) -> String {
        let mean = match self.decoupled_mean {
            MeanParameterization::Cb => "cb",
            MeanParameterization::Gp => "gp",
            MeanParameterization::GpCent => "gp_cent",
        };
        let opt = match self.hyper_optimizer {
            HyperOptimizer::MwMcem => "mw_mcem",
            HyperOptimizer::Mcem => "mcem",
        };
        let split = match self.split_mode {
            SplitMode::Random => "random",
            SplitMode::Fixed => "fixed",
        };
        let lines = [
            ("method", self.method.to_string()),
            ("hidden_layers", self.hidden_layers.to_string()),
            ("hidden_width", self.hidden_width.to_string()),
            ("num_inducing", self.num_inducing.to_string()),
            ("m_a", self.m_a.to_string()),
            ("m_b", self.m_b.to_string()),
            ("decoupled_mean", mean.to_string()),
            ("learning_rate", format!("{:?}", self.learning_rate)),
            ("batch_size", self.batch_size.to_string()),
            ("burn_in", self.burn_in.to_string()),
            ("sampling_iterations", self.sampling_iterations.to_string()),
            ("thin", self.thin.to_string()),
            ("window_capacity", self.window_capacity.to_string()),
            ("hyper_optimizer", opt.to_string()),
            ("mcem_set_size", self.mcem_set_size.to_string()),
            ("mcem_thin", self.mcem_thin.to_string()),
            ("dsvi_iterations", self.dsvi_iterations.to_string()),
            ("predict_samples", self.predict_samples.to_string()),
            ("initial_noise_variance", format!("{:?}", self.initial_noise_variance)),
            ("train_fraction", format!("{:?}", self.train_fraction)),
            ("split_mode", split.to_string()),
            ("target_columns", self.target_columns.join(",")),
            ("repetitions", self.repetitions.to_string()),
            ("seed", self.seed.to_string()),
            ("eval_every", self.eval_every.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn keys() -> &'static [&'static str] {
        &KEYS
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = ExperimentConfig::desk_scale();
        c.method = Method::DsviDgpDecoupled;
        c.decoupled_mean = MeanParameterization::GpCent;
        c.learning_rate = 0.003;
        c.target_columns = vec!["a".into(), "b".into()];
        c.split_mode = SplitMode::Fixed;
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn every_written_key_is_known() {
        for line in ExperimentConfig::default().to_text().lines() {
            let key = line.split('=').next().unwrap().trim();
            assert!(KEYS.contains(&key), "{key}");
        }
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = ExperimentConfig::parse("method = sgp\nhidden_layers = 0\nlearning_rat = 0.1\n").unwrap_err();
        match err {
            HarnessError::Config { key, .. } => assert_eq!(key, "learning_rat"),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let c = ExperimentConfig::parse("# header\n\nseed = 7\n  # indented comment\nthin=5\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.thin, 5);
    }

    #[test]
    fn desk_scale_key_applies_preset() {
        let c = ExperimentConfig::parse("desk_scale = true\n").unwrap();
        assert_eq!((c.burn_in, c.sampling_iterations, c.thin, c.num_samples()), (2000, 1000, 10, 100));
        assert_eq!(c.repetitions, 5);
    }

    #[test]
    fn shallow_baselines_reject_hidden_layers() {
        assert!(ExperimentConfig::parse("method = sgp\nhidden_layers = 2\n").is_err());
        let c = ExperimentConfig::parse("method = dec_sgp\nhidden_layers = 0\n").unwrap();
        assert_eq!(c.depth(), 0);
    }

    #[test]
    fn validation_catches_bad_fields() {
        for bad in [
            "hidden_layers = 5",
            "method = dsvi_dgp_decoupled\nm_b = 0",
            "thin = 0",
            "train_fraction = 1.0",
            "learning_rate = -1",
            "seed = abc",
            "method = bogus",
        ] {
            assert!(ExperimentConfig::parse(bad).is_err(), "{bad}");
        }
    }
}
