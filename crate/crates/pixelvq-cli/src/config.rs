//! Declarative run configuration: one TOML file per experiment, unknown keys
//! rejected, CLI flags override file values.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use pixelvq::model::training::TrainConfig;
use pixelvq::model::HyperParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKindConfig {
    Vqvae,
    Vae,
    PixelVae,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKindConfig,
    pub input_size: usize,
    #[serde(default)]
    pub scaling_blocks: usize,
    pub codebook_size: usize,
    pub embed_dim: usize,
    pub filters: usize,
    #[serde(default)]
    pub pixelsight: bool,
    #[serde(default)]
    pub adapter: bool,
}

impl ModelSection {
    pub fn hyper(&self) -> HyperParams {
        HyperParams {
            input_size: self.input_size,
            scaling_blocks: self.scaling_blocks,
            codebook_size: self.codebook_size,
            embed_dim: self.embed_dim,
            filters: self.filters,
            pixelsight: self.pixelsight,
            adapter: self.adapter,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_prior_layers() -> usize {
    7
}
fn default_prior_filters() -> usize {
    256
}
fn default_prior_kernel() -> usize {
    3
}
fn default_embed_width() -> usize {
    64
}

/// Architecture knobs for the autoregressive prior; K and the condition
/// vocabulary come from the paired checkpoint and corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    #[serde(default = "default_prior_layers")]
    pub n_layers: usize,
    #[serde(default = "default_prior_filters")]
    pub n_filters: usize,
    #[serde(default = "default_prior_kernel")]
    pub kernel: usize,
    #[serde(default = "default_embed_width")]
    pub embed_width: usize,
}

impl Default for PriorSection {
    fn default() -> Self {
        PriorSection {
            n_layers: default_prior_layers(),
            n_filters: default_prior_filters(),
            kernel: default_prior_kernel(),
            embed_width: default_embed_width(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorRunConfig {
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub vqvae_checkpoint: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub prior: PriorSection,
    #[serde(default)]
    pub train: TrainConfig,
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

pub fn load_prior_config(path: &Path) -> Result<PriorRunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}
