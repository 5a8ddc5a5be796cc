//! Versioned model files: a magic line, a version line, then the trained
//! model as JSON.

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::run::{Posterior, TrainedModel};
use std::fs;
use std::path::Path;

pub const MAGIC: &str = "DEEPGP-MODEL";
pub const FORMAT_VERSION: u32 = 1;

pub fn persist(trained: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    let body = serde_json::to_string(trained).map_err(|e| HarnessError::load("body", e.to_string()))?;
    fs::write(path, format!("{MAGIC}\nversion {FORMAT_VERSION}\n{body}\n"))?;
    Ok(())
}

/// Reads a model file. With `expected`, the stored layer shapes must match
/// the architecture that configuration would build.
pub fn restore(path: impl AsRef<Path>, expected: Option<&ExperimentConfig>) -> Result<TrainedModel> {
    let text = fs::read_to_string(path)?;
    let mut parts = text.splitn(3, '\n');
    if parts.next() != Some(MAGIC) {
        return Err(HarnessError::load("magic", format!("file does not start with `{MAGIC}`")));
    }
    let version_line = parts.next().ok_or_else(|| HarnessError::load("version", "missing"))?;
    let version: u32 = version_line
        .strip_prefix("version ")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| HarnessError::load("version", format!("malformed version line `{version_line}`")))?;
    if version != FORMAT_VERSION {
        return Err(HarnessError::load("version", format!("file has version {version}, expected {FORMAT_VERSION}")));
    }
    let body = parts.next().ok_or_else(|| HarnessError::load("body", "missing"))?;
    let trained: TrainedModel = serde_json::from_str(body).map_err(|e| HarnessError::load(&field_of(&e), e.to_string()))?;
    check_consistency(&trained)?;
    if let Some(config) = expected {
        check_architecture(&trained, config)?;
    }
    Ok(trained)
}

/// Best guess at the offending field from a serde message such as
/// "missing field `model`".
fn field_of(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    match msg.split('`').nth(1) {
        Some(name) if msg.contains("field") => name.to_string(),
        _ => "body".to_string(),
    }
}

fn check_consistency(trained: &TrainedModel) -> Result<()> {
    trained.model.validate().map_err(|e| HarnessError::load("model", e.to_string()))?;
    match &trained.posterior {
        Posterior::Samples(window) => {
            if window.is_empty() {
                return Err(HarnessError::load("posterior", "empty sample window"));
            }
            for sample in window.iter() {
                sample.check_against(&trained.model).map_err(|e| HarnessError::load("posterior", e.to_string()))?;
            }
        }
        Posterior::Variational(vp) => {
            vp.check_against(&trained.model).map_err(|e| HarnessError::load("posterior", e.to_string()))?;
        }
    }
    let first = &trained.model.layers[0];
    if first.input_dim() != trained.input_dim || trained.model.output_dim() != trained.output_dim {
        return Err(HarnessError::load("input_dim", "stored dimensions disagree with the model"));
    }
    Ok(())
}

fn check_architecture(trained: &TrainedModel, config: &ExperimentConfig) -> Result<()> {
    let mut widths = vec![trained.input_dim];
    widths.extend(std::iter::repeat_n(config.hidden_width, config.depth()));
    widths.push(trained.output_dim);
    let layers = &trained.model.layers;
    if layers.len() != widths.len() - 1 {
        return Err(HarnessError::load(
            "layers",
            format!("file has {} layers, configuration expects {}", layers.len(), widths.len() - 1),
        ));
    }
    for (l, layer) in layers.iter().enumerate() {
        let want = (widths[l], widths[l + 1]);
        let got = (layer.input_dim(), layer.output_dim());
        if got != want {
            return Err(HarnessError::load(
                &format!("layers[{l}]"),
                format!("layer {l} maps {} -> {} but configuration expects {} -> {}", got.0, got.1, want.0, want.1),
            ));
        }
    }
    Ok(())
}
