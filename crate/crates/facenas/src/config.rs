//! Run configuration, read from and snapshotted to TOML.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use facenas_core::landmarks::LandmarkLayout;
use facenas_core::search::{FinalizeConfig, SearchConfig};
use facenas_core::spectral::PipelineConfig;
use facenas_core::synth::SyntheticSpec;
use serde::{Deserialize, Serialize};

/// Environment variable that overrides every configured worker count.
pub const WORKERS_ENV: &str = "FACENAS_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Directory {
        path: PathBuf,
        #[serde(default = "default_layout")]
        layout: LandmarkLayout,
        #[serde(default)]
        label_min: f64,
        #[serde(default = "default_label_max")]
        label_max: f64,
    },
}

fn default_layout() -> LandmarkLayout {
    LandmarkLayout::ibug68(2)
}

fn default_label_max() -> f64 {
    24.0
}

impl DataSource {
    pub fn layout(&self) -> &LandmarkLayout {
        match self {
            DataSource::Synthetic(s) => &s.layout,
            DataSource::Directory { layout, .. } => layout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// `default`, `toy`, or a TOML space file.
    pub space: String,
    /// Seed of the train/validation/test split.
    pub split_seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSource,
    pub pipeline: PipelineConfig,
    pub search: SearchConfig,
    pub finalize: FinalizeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            space: "default".into(),
            split_seed: 0,
            out_dir: PathBuf::from("run"),
            data: DataSource::Synthetic(SyntheticSpec::default()),
            pipeline: PipelineConfig::default(),
            search: SearchConfig::default(),
            finalize: FinalizeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        self.search.validate()?;
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
        }
        self.data.layout().validate()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Reads a config file; returns it with the directory relative paths in
    /// it are resolved against.
    pub fn load(path: &Path) -> anyhow::Result<(Self, PathBuf)> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg = Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }
}

/// Worker count after the environment override.
pub fn effective_workers(configured: usize) -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(configured)
        .max(1)
}
