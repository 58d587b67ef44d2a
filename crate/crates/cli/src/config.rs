use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use splitnav::env::EnvConfig;
use splitnav::model::ModelConfig;
use splitnav::render::RenderConfig;
use splitnav::train::TrainConfig;
use splitnav::world::{FilterConfig, WorldGenConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    pub count: usize,
    pub extent: f64,
    pub first_id: usize,
}

impl Default for WorldSection {
    fn default() -> Self {
        Self { count: 16, extent: 8.0, first_id: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSection {
    pub count: usize,
    pub filter: FilterConfig,
}

impl Default for EpisodeSection {
    fn default() -> Self {
        Self { count: 200, filter: FilterConfig::default() }
    }
}

/// Step counts for each training command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub aux_frames: usize,
    pub aux_walk: usize,
    pub aux_steps: usize,
    pub bc_updates: usize,
    pub ppo_updates: usize,
    pub transfer_updates: usize,
    pub task_updates: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { aux_frames: 4000, aux_walk: 40, aux_steps: 500, bc_updates: 1000, ppo_updates: 500, transfer_updates: 200, task_updates: 300 }
    }
}

/// Everything a run depends on. Missing keys take their defaults and the
/// full materialized value is written to each run manifest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub world: WorldSection,
    pub worldgen: WorldGenConfig,
    pub episodes: EpisodeSection,
    pub render: RenderConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schedule: Schedule,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Self::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.render.height != self.model.height || self.render.width != self.model.width {
            bail!(
                "render resolution {}x{} differs from model input {}x{}",
                self.render.height,
                self.render.width,
                self.model.height,
                self.model.width
            );
        }
        if self.world.count == 0 || self.episodes.count == 0 {
            bail!("world and episode counts must be positive");
        }
        if self.world.extent < 5.0 {
            bail!("world extent must be at least 5 m, got {}", self.world.extent);
        }
        Ok(())
    }

    pub fn env(&self) -> EnvConfig {
        EnvConfig { render: self.render.clone(), ..EnvConfig::default() }
    }

    pub fn train_with(&self, seed: u64, workers: usize) -> TrainConfig {
        TrainConfig { seed, workers, ..self.train.clone() }
    }
}
