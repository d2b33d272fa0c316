//! TOML run configuration shared by every command.
//!
//! ```toml
//! [model]
//! layers = 4
//! variant = "of2"
//!
//! [train]
//! steps = 2000
//! lr = 1e-3
//!
//! [data]
//! count = 2048
//! seed = 0
//! [data.bounce]
//! speed_max = 1.5
//! ```
//!
//! Every section and key is optional; unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::BounceParams;
use crate::model::ModelConfig;
use crate::probe::ProbeConfig;
use crate::sampler::SamplerConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Parse(String),
    #[error("config: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Number of synthetic videos.
    pub count: usize,
    pub seed: u64,
    /// Read videos from this dataset file instead of generating them.
    pub path: Option<PathBuf>,
    pub bounce: BounceParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { count: 2048, seed: 0, path: None, bounce: BounceParams::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub sampler: SamplerConfig,
    pub probe: ProbeConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string().trim_end().to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse(m) => ConfigError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Section-level checks plus agreement between the data and model
    /// geometry.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.model.validate().map_err(|e| inv(&e))?;
        self.train.validate().map_err(|e| inv(&e))?;
        self.sampler.validate().map_err(|e| inv(&e))?;
        self.data.bounce.validate().map_err(|e| inv(&e))?;
        let (m, b) = (&self.model, &self.data.bounce);
        if (m.channels, m.height, m.width) != (b.channels, b.height, b.width) {
            return Err(ConfigError::Invalid(format!(
                "data frames are {}x{}x{} but the model expects {}x{}x{}",
                b.channels, b.height, b.width, m.channels, m.height, m.width
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn sections_override_defaults() {
        let c = RunConfig::parse("[model]\nlayers = 2\nvariant = \"of\"\nparam = \"eps\"\n[train]\nsteps = 5\n[data.bounce]\nspeed_max = 1.0\n").unwrap();
        assert_eq!(c.model.layers, 2);
        assert_eq!(c.model.variant, crate::frame_attention::MaskVariant::Vanilla);
        assert_eq!(c.model.param, crate::schedule::Parameterization::Epsilon);
        assert_eq!(c.model.hidden, ModelConfig::desk().hidden);
        assert_eq!(c.train.steps, 5);
        assert_eq!(c.data.bounce.speed_max, 1.0);
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = RunConfig::parse("[train]\nlearning_rate = 0.1\n").unwrap_err().to_string();
        assert!(e.contains("learning_rate"), "{e}");
        let e = RunConfig::parse("[trian]\n").unwrap_err().to_string();
        assert!(e.contains("trian"), "{e}");
    }

    #[test]
    fn round_trip_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn geometry_disagreement_is_invalid() {
        let c = RunConfig::parse("[data.bounce]\nheight = 8\nwidth = 8\nradius = 1.5\nspeed_max = 1.0\n").unwrap();
        assert!(matches!(c.validate(), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn missing_file_names_the_path() {
        let e = RunConfig::load(Path::new("/nonexistent/run.toml")).unwrap_err().to_string();
        assert!(e.contains("/nonexistent/run.toml"));
    }
}
