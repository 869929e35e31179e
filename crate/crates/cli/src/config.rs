//! Structured-text run configuration: a TOML file provides defaults, flags
//! override, and every command echoes its effective configuration next to
//! its outputs.

use std::path::{Path, PathBuf};

use anyhow::Context as _;
use inbetween_core::data::UpAxis;
use inbetween_core::schedule::SamplerMode;
use inbetween_core::Real;
use serde::{Deserialize, Serialize};

#[derive(Debug, Default, Clone, Deserialize)]
pub struct FileConfig {
    #[serde(default)]
    pub preprocess: PreprocessSection,
    #[serde(default)]
    pub denoiser: DenoiserSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub generate: GenerateSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }
}

#[derive(Debug, Default, Clone, Deserialize)]
pub struct PreprocessSection {
    pub fps: Option<Real>,
    pub block: Option<usize>,
    pub augment: Option<usize>,
    pub split_seed: Option<u64>,
    pub up_axis: Option<UpAxis>,
}

#[derive(Debug, Default, Clone, Deserialize)]
pub struct DenoiserSection {
    pub layers: Option<usize>,
    pub model_dim: Option<usize>,
    pub ff_dim: Option<usize>,
    pub heads: Option<usize>,
    pub dropout: Option<Real>,
    pub cache_context: Option<bool>,
}

#[derive(Debug, Default, Clone, Deserialize)]
pub struct TrainingSection {
    pub batch: Option<usize>,
    pub timesteps: Option<usize>,
    pub learning_rate: Option<Real>,
    pub beta1: Option<Real>,
    pub beta2: Option<Real>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub context_min: Option<usize>,
    pub context_max: Option<usize>,
    pub grad_clip: Option<Real>,
    pub beta_min: Option<Real>,
    pub beta_max: Option<Real>,
    pub patience: Option<usize>,
    pub eval_seed: Option<u64>,
}

#[derive(Debug, Default, Clone, Deserialize)]
pub struct GenerateSection {
    pub seed: Option<u64>,
    pub context_len: Option<usize>,
    pub sampler: Option<SamplerMode>,
}

#[derive(Debug, Default, Clone, Deserialize)]
pub struct EvaluateSection {
    pub seed: Option<u64>,
    pub context_lens: Option<Vec<usize>>,
    pub reps_per_condition: Option<usize>,
    pub conditions: Option<usize>,
    pub pair_count: Option<usize>,
    pub bootstrap_repeats: Option<usize>,
}

/// Write the effective configuration of a run next to its outputs.
pub fn echo_effective<T: Serialize>(dir: &Path, command: &str, effective: &T) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating run directory {}", dir.display()))?;
    let path = dir.join(format!("{command}.effective.toml"));
    let text =
        toml::to_string_pretty(effective).context("serializing effective configuration")?;
    std::fs::write(&path, format!("# effective configuration for `inbetween {command}`\n{text}"))
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Directory that should hold a file's run artifacts (its parent, or `.`).
pub fn run_dir_of(out: &Path) -> PathBuf {
    out.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}
