//! One structured run-config file aggregating every section, with a
//! stable content hash so any artifact directory identifies its run.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSpec, SamplingMode};
use crate::error::{DismoError, Result};
use crate::trainer::TrainConfig;

/// The full configuration of one run: the dataset recipe plus the
/// training recipe (which nests the module, generator, loss-weight and
/// capacity sections). Unset fields fall back to defaults, so a partial
/// TOML file is valid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetSpec {
                n_images: 2000,
                image_size: 64,
                content_sampling: SamplingMode::Normal,
                n_domains: 1,
                seed: 0,
            },
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults when no file is given; otherwise parse the TOML file and
    /// layer it over the defaults.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| DismoError::io(p, e))?;
                toml::from_str(&text).map_err(|e| {
                    DismoError::config("config file", format!("{}: {e}", p.display()))
                })
            }
        }
    }

    /// Cross-section validation on top of each section's own checks.
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        if self.train.generator.out_resolution != self.dataset.image_size {
            return Err(DismoError::config(
                "generator.out_resolution / dataset.image_size",
                format!(
                    "generator renders {} px but the dataset is {} px",
                    self.train.generator.out_resolution, self.dataset.image_size
                ),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| DismoError::Invalid(format!("config serialization: {e}")))
    }

    /// FNV-1a over the resolved TOML text: stable across runs, changes
    /// whenever any effective setting changes.
    pub fn hash(&self) -> Result<String> {
        Ok(format!("{:016x}", fnv1a(self.to_toml()?.as_bytes())))
    }

    /// Write `config_resolved.toml` and `config_hash.txt` into `dir`;
    /// returns the hash.
    pub fn write_resolved(&self, dir: &Path) -> Result<String> {
        fs::create_dir_all(dir).map_err(|e| DismoError::io(dir, e))?;
        let toml_text = self.to_toml()?;
        let hash = self.hash()?;
        let cfg_path = dir.join("config_resolved.toml");
        fs::write(&cfg_path, &toml_text).map_err(|e| DismoError::io(&cfg_path, e))?;
        let hash_path = dir.join("config_hash.txt");
        fs::write(&hash_path, format!("{hash}\n")).map_err(|e| DismoError::io(&hash_path, e))?;
        Ok(hash)
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1_0000_01b3);
    }
    h
}
