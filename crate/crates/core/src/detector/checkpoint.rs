use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Model;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{read_tensors, write_tensors, TensorEntry};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params_file: String,
    pub params: Vec<TensorEntry>,
}

impl Model {
    /// Writes `manifest.json` and `params.bin` (little-endian f32) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let entries = write_tensors(&dir.join(PARAMS_FILE), &self.params)?;
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            params_file: PARAMS_FILE.into(),
            params: entries,
        };
        let path = dir.join(MANIFEST);
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format {} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let params = read_tensors(&dir.join(&manifest.params_file), &manifest.params)?;
        Model::from_params(manifest.config, &params)
    }

    /// Rounds every parameter to f32, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        let ids: Vec<_> = self.params.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            self.params.get_mut(id).mapv_inplace(|x| x as f32 as f64);
        }
    }
}
