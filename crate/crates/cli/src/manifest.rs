use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use disen_cgcn::trainer::TrainingConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::args::Command;

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Provenance record written by every run. The id hashes everything that
/// determines the outputs, so replays share it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_id: String,
    pub tool_version: String,
    pub invocation: Command,
    /// Resolved training config, when the command trains or loads a model.
    pub config: Option<TrainingConfig>,
    pub seed: Option<u64>,
    /// SHA-256 of the dataset cache or input log.
    pub dataset_hash: Option<String>,
    /// SHA-256 of other input files, by role.
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn strip_outputs(value: &mut serde_json::Value) {
    if let serde_json::Value::Object(map) = value {
        map.remove("out");
        map.values_mut().for_each(strip_outputs);
    }
}

impl RunManifest {
    pub fn new(
        invocation: &Command,
        config: Option<TrainingConfig>,
        dataset_hash: Option<String>,
        input_hashes: BTreeMap<String, String>,
    ) -> Self {
        let mut m = RunManifest {
            manifest_id: String::new(),
            tool_version: format!("disen-cgcn {}", env!("CARGO_PKG_VERSION")),
            invocation: invocation.clone(),
            seed: config.as_ref().map(|c| c.seed),
            config,
            dataset_hash,
            input_hashes,
            outputs: Vec::new(),
        };
        let mut key = serde_json::to_value(&m).expect("manifest serializes");
        if let serde_json::Value::Object(map) = &mut key {
            map.remove("manifest_id");
            map.remove("outputs");
            if let Some(inv) = map.get_mut("invocation") {
                strip_outputs(inv);
                // The config file is captured by the resolved config.
                if let serde_json::Value::Object(inv) = inv {
                    if let Some(serde_json::Value::Object(flags)) = inv.get_mut("flags") {
                        flags.remove("config");
                    }
                }
            }
        }
        m.manifest_id = hex::encode(Sha256::digest(key.to_string().as_bytes()));
        m
    }

    pub fn record(&mut self, out_dir: &Path, file: &Path) {
        let rel = file.strip_prefix(out_dir).unwrap_or(file);
        self.outputs.push(rel.display().to_string());
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
