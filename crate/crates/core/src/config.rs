//! Run configuration (TOML) and scenario/instance files.
//!
//! Every constant the workbench uses lives in [`RunConfig`]; defaults are
//! the reference settings (15x15 FOV, 4-frame stacks, r1 = -0.01,
//! r2 = -0.1, r3 = 0.1, 3 conv blocks, batch 32, learning rate 3e-5).
//! Output files go to `GRIDRL_OUT_DIR` (default `./out`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{generate_map, Cell, GridMap, MapKind};
use crate::learner::TrainConfig;
use crate::net::NetConfig;
use crate::reward::{RewardMode, RewardParams};

/// Environment variable naming the output directory.
pub const OUT_DIR_ENV: &str = "GRIDRL_OUT_DIR";

pub fn output_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"))
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("map: {0}")]
    Map(#[from] crate::grid::MapError),
    #[error("reward: {0}")]
    Reward(#[from] crate::reward::RewardError),
    #[error("net: {0}")]
    Net(#[from] crate::net::NetError),
    #[error("{0}")]
    Invalid(String),
}

/// Map source: a generator spec, optionally overridden by a map file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct MapSection {
    pub kind: MapKind,
    pub height: usize,
    pub width: usize,
    pub static_density: f64,
    pub seed: u64,
    /// When set, load this map file instead of generating.
    pub file: Option<String>,
}

impl Default for MapSection {
    fn default() -> Self {
        MapSection {
            kind: MapKind::Random,
            height: 100,
            width: 100,
            static_density: 0.15,
            seed: 1,
            file: None,
        }
    }
}

impl MapSection {
    pub fn build(&self) -> Result<GridMap, ConfigError> {
        match &self.file {
            Some(path) => Ok(GridMap::load(path)?),
            None => Ok(generate_map(
                self.kind,
                self.height,
                self.width,
                self.static_density,
                self.seed,
            )?),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvSection {
    /// Local field-of-view side length (odd).
    pub fov: usize,
    /// Number of stacked observation frames.
    pub seq_len: usize,
    /// Dynamic obstacles as a fraction of the full grid area.
    pub dynamic_density: f64,
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection {
            fov: 15,
            seq_len: 4,
            dynamic_density: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardSection {
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub r4: f64,
    pub strict_on_guidance: f64,
    pub mode: RewardMode,
}

impl Default for RewardSection {
    fn default() -> Self {
        let p = RewardParams::default();
        RewardSection {
            r1: p.r1,
            r2: p.r2,
            r3: p.r3,
            r4: p.r4,
            strict_on_guidance: p.strict_on_guidance,
            mode: RewardMode::Guidance,
        }
    }
}

impl RewardSection {
    pub fn params(&self) -> RewardParams {
        RewardParams {
            r1: self.r1,
            r2: self.r2,
            r3: self.r3,
            r4: self.r4,
            strict_on_guidance: self.strict_on_guidance,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct NetSection {
    pub conv_blocks: usize,
    pub base_channels: usize,
    pub lstm_units: usize,
    pub dense_units: usize,
}

impl Default for NetSection {
    fn default() -> Self {
        NetSection {
            conv_blocks: 3,
            base_channels: 32,
            lstm_units: 512,
            dense_units: 512,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Exact start/goal Manhattan distance for sampled instances.
    pub manhattan: usize,
    pub instances: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            manhattan: 100,
            instances: 100,
            seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct MultiSection {
    pub robots: usize,
    pub instances: usize,
    pub timeout: usize,
    pub seed: u64,
}

impl Default for MultiSection {
    fn default() -> Self {
        MultiSection {
            robots: 32,
            instances: 100,
            timeout: 100,
            seed: 7,
        }
    }
}

/// The complete run configuration.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub map: MapSection,
    pub env: EnvSection,
    pub reward: RewardSection,
    pub net: NetSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub multi: MultiSection,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: RunConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.env.fov % 2 == 0 || self.env.fov < 3 {
            return Err(ConfigError::Invalid(format!(
                "env.fov must be odd and >= 3, got {}",
                self.env.fov
            )));
        }
        if !(0.0..1.0).contains(&self.env.dynamic_density) {
            return Err(ConfigError::Invalid(format!(
                "env.dynamic_density must be in [0, 1), got {}",
                self.env.dynamic_density
            )));
        }
        self.reward.params().validate()?;
        self.net_config().validate()?;
        Ok(())
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            fov: self.env.fov,
            seq_len: self.env.seq_len,
            conv_blocks: self.net.conv_blocks,
            base_channels: self.net.base_channels,
            lstm_units: self.net.lstm_units,
            dense_units: self.net.dense_units,
        }
    }

    /// Dynamic obstacle count: density times grid area.
    pub fn obstacle_count(&self, map: &GridMap) -> usize {
        (self.env.dynamic_density * (map.height() * map.width()) as f64).round() as usize
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// A fully pinned benchmark instance: map source, obstacle count, robot
/// start/goal list, and the instance seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    #[serde(default)]
    pub obstacles: usize,
    pub map: MapSection,
    #[serde(default)]
    pub robots: Vec<RobotSpec>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RobotSpec {
    pub start: [usize; 2],
    pub goal: [usize; 2],
}

impl RobotSpec {
    pub fn start_cell(&self) -> Cell {
        Cell::new(self.start[0], self.start[1])
    }
    pub fn goal_cell(&self) -> Cell {
        Cell::new(self.goal[0], self.goal[1])
    }
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Scenario, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Ok(toml::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), std::io::Error> {
        std::fs::write(path, toml::to_string_pretty(self).expect("scenario serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_reference_values() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.env.fov, 15);
        assert_eq!(cfg.env.seq_len, 4);
        assert_eq!(cfg.reward.r1, -0.01);
        assert_eq!(cfg.reward.r2, -0.1);
        assert_eq!(cfg.reward.r3, 0.1);
        assert_eq!(cfg.net.conv_blocks, 3);
        assert_eq!(cfg.train.batch_size, 32);
        assert!((cfg.train.learning_rate - 3e-5).abs() < 1e-12);
        assert!(cfg.validate().is_ok());
        let net = cfg.net_config();
        assert_eq!(net.feature_shape(), (4, 2, 2, 128));
    }

    #[test]
    fn toml_roundtrip_and_partial_files() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.env.fov, cfg.env.fov);

        // Partial configs fall back to defaults.
        let partial: RunConfig = toml::from_str(
            "[map]\nkind = \"free\"\nheight = 20\nwidth = 20\nstatic_density = 0.0\n\n[env]\nfov = 9\n",
        )
        .unwrap();
        assert_eq!(partial.map.kind, MapKind::Free);
        assert_eq!(partial.env.fov, 9);
        assert_eq!(partial.env.seq_len, 4);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.env.fov = 8;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.reward.r2 = 0.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn obstacle_count_follows_density() {
        let cfg: RunConfig =
            toml::from_str("[env]\nfov = 9\ndynamic_density = 0.05\n").unwrap();
        let map = GridMap::build(20, 20, std::iter::empty()).unwrap();
        assert_eq!(cfg.obstacle_count(&map), 20);
    }

    #[test]
    fn scenario_roundtrip() {
        let sc = Scenario {
            seed: 9,
            obstacles: 4,
            map: MapSection {
                height: 10,
                width: 10,
                ..Default::default()
            },
            robots: vec![RobotSpec {
                start: [0, 0],
                goal: [9, 9],
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenario.toml");
        sc.save(&path).unwrap();
        let back = Scenario::load(&path).unwrap();
        assert_eq!(back.seed, 9);
        assert_eq!(back.robots.len(), 1);
        assert_eq!(back.robots[0].goal_cell(), Cell::new(9, 9));
    }
}
