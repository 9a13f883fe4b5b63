//! Experiment configuration files: versioned JSON tying together the model,
//! training recipe, corpus spec, and evaluation bins. Unknown keys are
//! rejected and a SHA-256 of the canonical JSON travels with every artifact.

use crate::cascade::CascadeConfig;
use crate::corpus::CorpusSpec;
use crate::error::{Error, Result};
use crate::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub cascade: CascadeConfig,
    pub train: TrainConfig,
    pub corpus: CorpusSpec,
    /// Token-count bin edges for evaluation reports.
    #[serde(default = "default_bins")]
    pub eval_bins: Vec<usize>,
    /// Generation budget per document during evaluation.
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
}

fn default_bins() -> Vec<usize> {
    vec![64, 96, 128, 192, 256]
}

fn default_max_new_tokens() -> usize {
    512
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.cascade.validate()?;
        self.train.validate()?;
        self.corpus.validate()?;
        if self.eval_bins.len() < 2 || !self.eval_bins.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(
                "eval_bins must be at least two strictly increasing edges".into(),
            ));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be >= 1".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical (serde-serialized) JSON form, hex-encoded.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canon);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Provenance manifest written next to every command's artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub command: String,
    pub artifacts: Vec<String>,
}

pub fn write_manifest(manifest: &Manifest, dir: &Path) -> Result<()> {
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))
}
