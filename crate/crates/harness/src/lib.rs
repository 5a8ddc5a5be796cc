//! Experiment harness for deep GP regression: data handling, configuration,
//! training and evaluation of every method, model files and curve tables.

pub mod cli;
pub mod config;
pub mod curves;
pub mod data;
pub mod error;
pub mod persist;
pub mod run;
pub mod toy;
