//! TOML run configuration. Every key is optional and falls back to the
//! default shown in `Config::default()`; relative paths resolve against the
//! directory of the config file.
//!
//! ```toml
//! [data]
//! speeds = "data/speeds.csv"        # timestamp,<segment>...; empty or 0 = missing
//! distances = "data/distances.csv"  # square matrix in miles (or `coordinates`)
//! workzones = "data/workzones.csv"  # segment_id,start,end
//! adjacency_radius = 1.5            # miles, for the network snapshot
//! cache = "cache/features.bin"
//!
//! [features]
//! delta = -5.0      # diff gate on the construction map, MPH
//! sigma = 1.0       # RBF bandwidth, miles
//! history = 12
//! horizon = 12
//! split = { train = 0.7, val = 0.1, test = 0.2 }
//!
//! [model]           # see ModelConfig
//! [training]        # see TrainConfig
//!
//! [evaluation]
//! horizon = 12
//! condition = "all"
//! workzone_radius = 0.0
//! disruption_threshold = 5.0
//!
//! [service]
//! bind = "127.0.0.1:8080"
//!
//! [output]
//! dir = "out"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::evaluation::Condition;
use crate::features::FeatureOptions;
use crate::model::ModelConfig;
use crate::training::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub speeds: PathBuf,
    /// Square distance matrix CSV; takes precedence over `coordinates`.
    pub distances: Option<PathBuf>,
    /// `segment_id,lat,lon` CSV, converted with great-circle distances.
    pub coordinates: Option<PathBuf>,
    pub workzones: Option<PathBuf>,
    pub adjacency_radius: f64,
    pub cache: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            speeds: PathBuf::from("data/speeds.csv"),
            distances: Some(PathBuf::from("data/distances.csv")),
            coordinates: None,
            workzones: Some(PathBuf::from("data/workzones.csv")),
            adjacency_radius: 1.5,
            cache: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Forecast steps scored (the first `horizon` of the model's output).
    pub horizon: usize,
    pub condition: Condition,
    /// Miles from a work zone within which a cell counts as work-zone.
    pub workzone_radius: f64,
    pub disruption_threshold: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            horizon: 12,
            condition: Condition::All,
            workzone_radius: 0.0,
            disruption_threshold: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    /// Defaults to `<output.dir>/checkpoint.json`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub features: FeatureOptions,
    /// `history` and `horizon` here must agree with `[features]`.
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub evaluation: EvaluationConfig,
    pub service: ServiceConfig,
    pub output: OutputConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        // The model's window follows the feature window unless set explicitly.
        let raw: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let model_keys = raw.get("model").and_then(|m| m.as_table());
        if !model_keys.is_some_and(|m| m.contains_key("history")) {
            cfg.model.history = cfg.features.history;
        }
        if !model_keys.is_some_and(|m| m.contains_key("horizon")) {
            cfg.model.horizon = cfg.features.horizon;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.speeds);
        for p in [
            &mut self.data.distances,
            &mut self.data.coordinates,
            &mut self.data.workzones,
            &mut self.data.cache,
            &mut self.service.checkpoint,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.output.dir);
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        self.model.validate().map_err(wrap)?;
        self.training.validate().map_err(wrap)?;
        self.features.split.validate().map_err(wrap)?;
        if self.model.history != self.features.history || self.model.horizon != self.features.horizon {
            return Err(Error::Config(format!(
                "model window {}/{} differs from features window {}/{}",
                self.model.history, self.model.horizon, self.features.history, self.features.horizon
            )));
        }
        if !(self.features.sigma > 0.0) {
            return Err(Error::Config("features.sigma must be positive".into()));
        }
        if self.evaluation.horizon == 0 || self.evaluation.horizon > self.model.horizon {
            return Err(Error::Config(format!(
                "evaluation.horizon {} must lie in 1..={}",
                self.evaluation.horizon, self.model.horizon
            )));
        }
        if self.data.distances.is_none() && self.data.coordinates.is_none() {
            return Err(Error::Config("data needs `distances` or `coordinates`".into()));
        }
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.service
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.output.dir.join("checkpoint.json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = Config::from_toml("").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.training.epochs, 200);
        assert_eq!(c.training.batch_size, 16);
    }

    #[test]
    fn model_window_follows_features() {
        let c = Config::from_toml("[features]\nhistory = 6\nhorizon = 3\n[evaluation]\nhorizon = 3\n").unwrap();
        assert_eq!((c.model.history, c.model.horizon), (6, 3));
        assert!(Config::from_toml("[features]\nhistory = 6\n[model]\nhistory = 8\n").is_err());
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let e = Config::from_toml("[training]\nlearning_rat = 0.1\n").unwrap_err();
        assert_eq!(e.kind(), crate::error::ErrorKind::Config);
    }

    #[test]
    fn neighbors_accepts_all() {
        let c = Config::from_toml("[model]\nk_neighbors = \"all\"\nspeed_wave = \"weighted\"\n").unwrap();
        assert_eq!(c.model.k_neighbors, crate::graph::Neighbors::All);
    }

    #[test]
    fn relative_paths_resolve() {
        let mut c = Config::default();
        c.resolve_paths(Path::new("/srv/run"));
        assert_eq!(c.data.speeds, PathBuf::from("/srv/run/data/speeds.csv"));
        assert_eq!(c.checkpoint_path(), PathBuf::from("/srv/run/out/checkpoint.json"));
    }
}
