//! Run configuration: one TOML file drives an experiment end to end.
//!
//! Parsing is strict (unknown keys are rejected, since a typo that silently
//! falls back to a default invalidates an experiment), every field has a
//! default, and the fully resolved configuration is persisted next to a
//! run's outputs so results stay attributable to exact settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::DatasetSpec;
use crate::error::{DfmError, Result};
use crate::net::LayerSizes;
use crate::sampler::SamplerConfig;
use crate::search::SearchConfig;
use crate::train::TrainConfig;

/// Environment variable that overrides the output directory.
pub const OUT_DIR_ENV: &str = "DFM_OUT_DIR";

/// Name of the persisted effective-settings file.
pub const RESOLVED_FILE: &str = "resolved.toml";

/// Which synthetic dataset family to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Multi-class, multi-pitch, multi-velocity unimodal Gaussians.
    Default,
    /// One-dimensional classes with two modes per condition; exercises the
    /// variance head on genuinely ambiguous targets.
    BimodalLine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Samples drawn per condition when a command materializes the dataset.
    pub n_per_condition: usize,
    /// Class count for the bimodal line; the default family fixes its own.
    pub classes: usize,
    pub separation: f64,
    pub sigma_data: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Default,
            n_per_condition: 64,
            classes: 2,
            separation: 2.0,
            sigma_data: 0.05,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn build_spec(&self) -> Result<DatasetSpec> {
        let spec = match self.kind {
            DatasetKind::Default => DatasetSpec::default_spec(self.seed),
            DatasetKind::BimodalLine => DatasetSpec::bimodal_line(
                self.classes,
                self.separation,
                self.sigma_data,
                self.seed,
            ),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub hidden: usize,
    pub depth: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { hidden: 64, depth: 3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedConfig {
    pub dim: usize,
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig { dim: crate::search::DEFAULT_EMBED_DIM, seed: 0 }
    }
}

/// Complete experiment configuration. All randomness in a run flows from the
/// single top-level seed: [`RunConfig::resolve`] pushes it into every
/// section, so per-section seed keys in a file are informational only and
/// always overwritten.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub search: SearchConfig,
    pub embed: EmbedConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/latest"),
            dataset: DatasetConfig::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            search: SearchConfig::default(),
            embed: EmbedConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        toml::from_str(text)
            .map_err(|e| DfmError::Config(format!("config parse error: {e}")))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            DfmError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    /// Apply command-line overrides and thread the single seed through every
    /// section. `out_dir` precedence: flag, then the environment override,
    /// then the config file value.
    pub fn resolve(mut self, seed: Option<u64>, out_dir: Option<PathBuf>) -> RunConfig {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(dir) = out_dir {
            self.out_dir = dir;
        } else if let Ok(env_dir) = std::env::var(OUT_DIR_ENV) {
            if !env_dir.is_empty() {
                self.out_dir = PathBuf::from(env_dir);
            }
        }
        self.dataset.seed = self.seed;
        self.train.seed = self.seed;
        self.sampler.seed = self.seed;
        self.search.seed = self.seed;
        self.embed.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.net.hidden == 0 || self.net.depth == 0 {
            return Err(DfmError::Config(
                "net.hidden and net.depth must be positive".into(),
            ));
        }
        if self.embed.dim == 0 {
            return Err(DfmError::Config("embed.dim must be positive".into()));
        }
        if self.dataset.n_per_condition == 0 {
            return Err(DfmError::Config("dataset.n_per_condition must be positive".into()));
        }
        self.train.validate()?;
        self.sampler.validate()?;
        self.search.validate()?;
        Ok(())
    }

    pub fn layer_sizes(&self, spec: &DatasetSpec) -> LayerSizes {
        LayerSizes {
            d: spec.d,
            hidden: self.net.hidden,
            depth: self.net.depth,
            classes: spec.classes,
            pitches: spec.pitches,
            velocities: spec.velocities,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| DfmError::Config(format!("config does not serialize: {e}")))
    }

    /// Persist the effective settings next to a run's outputs.
    pub fn write_resolved(&self, out_dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join(RESOLVED_FILE);
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }
}
