//! Command line front end. `main` only parses arguments and reports errors.

use crate::config::{ExperimentConfig, Method};
use crate::curves::emit_curves;
use crate::data::{load_csv, synthetic_gp, synthetic_step, toy_dataset, Dataset};
use crate::error::{HarnessError, Result};
use crate::persist::{persist, restore};
use crate::run::{run_experiment, run_recorded, Posterior, RunRecord};
use clap::{Args, Parser, Subcommand};
use deepgp::diagnostics::{gaussianity_report, DEFAULT_ALPHA, DEFAULT_TESTED_COORDS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "deepgp", version, about = "Deep GP regression with SGHMC and DSVI")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one method on one split and save the model and run record.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for model.dgp, record.json and curves.tsv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a saved model on a CSV in original units.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Check the stored architecture against this configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Kurtosis-based Gaussianity report on a saved sample window.
    AnalyzePosterior {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        coords: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
        /// Seed for the coordinate selection.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeated runs of several methods with summary statistics.
    Compare {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated method names.
        #[arg(long, value_delimiter = ',', default_value = "sghmc_dgp,dsvi_dgp")]
        methods: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge the curves of saved run records into one table.
    EmitCurves {
        #[arg(long, num_args = 1.., required = true)]
        records: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// CSV file with a header row.
    #[arg(long, conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    /// Built-in data instead of a file: toy, step or gp.
    #[arg(long)]
    pub synthetic: Option<String>,
    /// Rows for the synthetic generators.
    #[arg(long, default_value_t = 1000)]
    pub rows: usize,
    /// Target columns of the CSV; overrides the configuration.
    #[arg(long, value_delimiter = ',')]
    pub targets: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Scaled-down iteration budgets.
    #[arg(long)]
    pub desk_scale: bool,
    /// `key=value` overrides applied after the file.
    #[arg(long = "set")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::default();
        if self.desk_scale {
            config.apply_desk_scale();
        }
        if let Some(path) = &self.config {
            config.apply_text(&fs::read_to_string(path)?)?;
        }
        for o in &self.overrides {
            config.apply_override(o)?;
        }
        config.validate()?;
        Ok(config)
    }
}

impl DataArgs {
    fn load(&self, config: &ExperimentConfig) -> Result<Dataset> {
        match (&self.data, &self.synthetic) {
            (Some(path), None) => {
                let targets = self.targets.clone().unwrap_or_else(|| config.target_columns.clone());
                let names: Vec<&str> = targets.iter().map(String::as_str).collect();
                load_csv(path, &names)
            }
            (None, Some(kind)) => match kind.as_str() {
                "toy" => Ok(toy_dataset()),
                "step" => synthetic_step(self.rows, 1, 0.1, config.seed),
                "gp" => synthetic_gp(self.rows, 0.5, 0.1, config.seed),
                other => Err(HarnessError::invalid(format!("unknown synthetic dataset `{other}`"))),
            },
            _ => Err(HarnessError::invalid("give exactly one of --data and --synthetic")),
        }
    }
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::invalid(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

/// Runs a parsed command and returns what should go to stdout.
pub fn execute(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Train { data, config, out } => {
            let config = config.resolve()?;
            let dataset = data.load(&config)?;
            fs::create_dir_all(&out)?;
            let (mut record, trained) = run_experiment(&config, &dataset)?;
            let model_path = out.join("model.dgp");
            persist(&trained, &model_path)?;
            record.artifacts.push(model_path.display().to_string());
            if !record.curves.is_empty() {
                let curves_path = out.join("curves.tsv");
                emit_curves(&record.curves, &curves_path)?;
                record.artifacts.push(curves_path.display().to_string());
            }
            write_json(&record, &out.join("record.json"))?;
            Ok(format!(
                "method={}\tseed={}\ttest_mll={:?}\ttest_rmse={:?}\n",
                config.method, config.seed, record.test_mll, record.test_rmse
            ))
        }
        Command::Evaluate { model, data, config } => {
            let expected = config.map(|p| ExperimentConfig::parse(&fs::read_to_string(p)?)).transpose()?;
            let trained = restore(&model, expected.as_ref())?;
            let raw = data.load(&trained.config)?;
            let norm = &trained.normalization;
            let test = Dataset {
                name: raw.name.clone(),
                x: norm.apply_x(&raw.x),
                y: norm.apply_y(&raw.y),
                normalization: norm.clone(),
            };
            let (mll, rmse) = trained.evaluate(&test)?;
            Ok(format!("rows={}\ttest_mll={mll:?}\ttest_rmse={rmse:?}\n", test.len()))
        }
        Command::AnalyzePosterior { model, coords, alpha, seed, out } => {
            let trained = restore(&model, None)?;
            let Posterior::Samples(window) = &trained.posterior else {
                return Err(HarnessError::invalid("posterior analysis needs a sampler model"));
            };
            let dim = window.get(0).map(|s| s.len()).unwrap_or(0);
            let n = coords.unwrap_or(DEFAULT_TESTED_COORDS.min(dim));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let report = gaussianity_report(window, n, alpha, trained.config.method.name(), &mut rng)?;
            fs::write(&out, report.to_tsv())?;
            Ok(format!(
                "coordinates={}\trejections={}\tcorrected_alpha={:e}\n",
                report.tests.len(),
                report.rejections(),
                report.corrected_alpha
            ))
        }
        Command::Compare { data, config, methods, out } => {
            let base = config.resolve()?;
            let dataset = data.load(&base)?;
            fs::create_dir_all(&out)?;
            let methods = methods
                .iter()
                .map(|m| m.parse::<Method>().map_err(|e| HarnessError::config("methods", e)))
                .collect::<Result<Vec<_>>>()?;
            let mut table = String::from("method\trepetition\tseed\ttest_mll\ttest_rmse\terror\n");
            let mut summary = String::new();
            let mut records: Vec<RunRecord> = Vec::new();
            for method in methods {
                let mut mlls = Vec::new();
                let mut rmses = Vec::new();
                for rep in 0..base.repetitions {
                    let mut config = base.clone();
                    config.method = method;
                    if method.is_shallow() {
                        config.hidden_layers = 0;
                    }
                    config.seed = base.seed + rep as u64;
                    let (record, _) = run_recorded(&config, &dataset);
                    let _ = writeln!(
                        table,
                        "{method}\t{rep}\t{}\t{:?}\t{:?}\t{}",
                        config.seed,
                        record.test_mll,
                        record.test_rmse,
                        record.error.clone().unwrap_or_default()
                    );
                    if record.error.is_none() {
                        mlls.push(record.test_mll);
                        rmses.push(record.test_rmse);
                    }
                    records.push(record);
                }
                let (m, se) = mean_and_se(&mlls);
                let (r, rse) = mean_and_se(&rmses);
                let _ = writeln!(
                    summary,
                    "method={method}\truns={}\ttest_mll={m:.4}±{se:.4}\ttest_rmse={r:.4}±{rse:.4}",
                    mlls.len()
                );
            }
            fs::write(out.join("compare.tsv"), table)?;
            let curves: Vec<_> = records.iter().flat_map(|r| r.curves.iter().cloned()).collect();
            if !curves.is_empty() {
                emit_curves(&curves, out.join("curves.tsv"))?;
            }
            write_json(&records, &out.join("records.json"))?;
            Ok(summary)
        }
        Command::EmitCurves { records, out } => {
            let mut points = Vec::new();
            for path in &records {
                let text = fs::read_to_string(path)?;
                let record: RunRecord = serde_json::from_str(&text)
                    .map_err(|e| HarnessError::load("record", format!("{}: {e}", path.display())))?;
                points.extend(record.curves);
            }
            emit_curves(&points, &out)?;
            Ok(format!("rows={}\n", points.len()))
        }
    }
}

/// Mean and standard error; NaN for an empty slice, zero error for one value.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
