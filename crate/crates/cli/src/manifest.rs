//! Run manifest: which configuration produced which outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{PipelineConfig, SCHEMA_VERSION};
use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub schema_version: u32,
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_sha256: String,
    pub seed: u64,
    pub outputs: Vec<PathBuf>,
}

impl Manifest {
    fn new() -> Self {
        Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            schema_version: SCHEMA_VERSION,
            stages: BTreeMap::new(),
        }
    }

    /// Reads the manifest, or starts a new one when absent or unreadable.
    pub fn load_or_new(path: &Path) -> Manifest {
        std::fs::read_to_string(path)
            .ok()
            .and_then(|t| serde_json::from_str::<Manifest>(&t).ok())
            .filter(|m| m.schema_version == SCHEMA_VERSION)
            .unwrap_or_else(Manifest::new)
    }
}

/// Records the outputs of `stage` under the effective config digest.
pub fn record_stage(cfg: &PipelineConfig, stage: &str, outputs: &[PathBuf]) -> Result<()> {
    std::fs::create_dir_all(&cfg.run_dir).map_err(|e| CliError::io(&cfg.run_dir, e))?;
    let path = cfg.run_dir.join(MANIFEST_FILE);
    let mut manifest = Manifest::load_or_new(&path);
    manifest.tool = env!("CARGO_PKG_NAME").into();
    manifest.version = env!("CARGO_PKG_VERSION").into();
    manifest.stages.insert(
        stage.into(),
        StageRecord {
            config_sha256: cfg.digest(),
            seed: cfg.seed,
            outputs: outputs.to_vec(),
        },
    );
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}
