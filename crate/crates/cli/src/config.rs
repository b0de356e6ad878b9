//! Optional TOML config file. Every flag can also be set here; explicit
//! command-line flags win over the file, which wins over the defaults.

use anyhow::{Context, Result};
use serde::Deserialize;
use std::path::Path;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub query: QuerySection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub bench: BenchSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub groups: Option<usize>,
    pub objects: Option<usize>,
    pub parts: Option<usize>,
    pub gaussians_per_part: Option<usize>,
    pub scale_ratio: Option<f64>,
    pub seed: Option<u64>,
    pub views: Option<usize>,
    pub eval_views: Option<usize>,
    pub size: Option<usize>,
    pub dim: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub iterations: Option<usize>,
    pub batch: Option<usize>,
    pub lambda: Option<f64>,
    pub step_size: Option<usize>,
    pub seed: Option<u64>,
    pub resolution: Option<usize>,
    pub channels: Option<usize>,
    pub hidden: Option<usize>,
    pub lr_triplane: Option<f64>,
    pub lr_mlp: Option<f64>,
    pub lr_projection: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySection {
    pub mode: Option<String>,
    pub step_size: Option<usize>,
    pub temperature: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub threshold: Option<f64>,
    pub scene_name: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub step_size: Option<usize>,
    pub reps: Option<usize>,
}

pub fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

/// CLI flag > config file > default.
pub fn pick<T>(cli: Option<T>, file: Option<T>, default: T) -> T {
    cli.or(file).unwrap_or(default)
}
