//! JSON run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::DataConfig;
use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory written by `gen-data` and read by the training commands.
    pub dataset: PathBuf,
    /// Directory for checkpoints, metrics and sweep tables.
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            dataset: PathBuf::from("runs/data"),
            out: PathBuf::from("runs/out"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    /// Training seed. Overrides `pipeline.seed`.
    pub seed: u64,
    /// Seed of the synthetic catalog and scenes; defaults to `seed`.
    pub data_seed: Option<u64>,
    pub data: DataConfig,
    pub pipeline: PipelineConfig,
    pub paths: Paths,
}


impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline().validate()?;
        let d = &self.data;
        if d.image_size == 0 || !d.image_size.is_multiple_of(crate::networks::DOWNSAMPLE) {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of {}",
                d.image_size,
                crate::networks::DOWNSAMPLE
            )));
        }
        if d.train == 0 {
            return Err(Error::Config("the training split must not be empty".into()));
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    /// Pipeline settings with the run seed applied.
    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            seed: self.seed,
            ..self.pipeline.clone()
        }
    }

    /// SHA-256 of the canonical JSON form, lower-case hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
