use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::{read_text, IoError};
use crate::decode::DecodeConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub schema: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

/// Everything a run needs. Entity and relation counts in `model` are
/// overwritten from the schema when a run starts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub precision: Precision,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Resolves relative paths against `base`.
    pub fn rebase(&mut self, base: &Path) {
        let p = &mut self.paths;
        for slot in [&mut p.schema, &mut p.train, &mut p.dev, &mut p.test, &mut p.output_dir] {
            if let Some(path) = slot.as_mut() {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.model.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        self.decode.validate().map_err(|e| e.to_string())?;
        Ok(())
    }
}

/// Reads a TOML run config; relative paths are taken from the file's directory.
pub fn load_run_config(path: &Path) -> Result<RunConfig, IoError> {
    let text = read_text(path)?;
    let mut cfg = RunConfig::from_toml(&text).map_err(|message| IoError::Config {
        path: path.to_path_buf(),
        message,
    })?;
    if let Some(dir) = path.parent() {
        cfg.rebase(dir);
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_keeps_defaults() {
        let cfg = RunConfig::from_toml(
            "precision = \"f64\"\n[model]\nd_model = 64\nheads = 4\n[train]\nmax_steps = 10\nordering = \"random\"\n[paths]\ntrain = \"data/train.jsonl\"\n",
        )
        .unwrap();
        assert_eq!(cfg.precision, Precision::F64);
        assert_eq!(cfg.model.d_model, 64);
        assert_eq!(cfg.model.dec_layers, ModelConfig::default().dec_layers);
        assert_eq!(cfg.train.max_steps, 10);
        assert_eq!(cfg.train.lr_encoder, 3e-5);
        let mut c2 = cfg.clone();
        c2.rebase(Path::new("/base"));
        assert_eq!(c2.paths.train.unwrap(), Path::new("/base/data/train.jsonl"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[model]\nwidth = 3\n").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
}
