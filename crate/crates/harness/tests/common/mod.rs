#![allow(dead_code)]

use deepgp_harness::config::{ExperimentConfig, Method};
use deepgp_harness::data::{synthetic_step, Dataset};

/// Small budgets that still exercise every phase.
pub fn quick(method: Method) -> ExperimentConfig {
    ExperimentConfig {
        method,
        hidden_layers: if method.is_shallow() { 0 } else { 1 },
        hidden_width: 2,
        num_inducing: 10,
        m_a: 12,
        m_b: 6,
        burn_in: 150,
        sampling_iterations: 100,
        thin: 10,
        window_capacity: 20,
        mcem_set_size: 3,
        mcem_thin: 5,
        dsvi_iterations: 150,
        predict_samples: 10,
        seed: 3,
        ..ExperimentConfig::default()
    }
}

pub fn small_data() -> Dataset {
    synthetic_step(60, 2, 0.1, 11).unwrap()
}
