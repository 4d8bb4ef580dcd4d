//! Run manifest: the reproducibility record written once per output
//! directory.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FORMAT: &str = "ctrlr-manifest-v1";
pub const MANIFEST_NAME: &str = "manifest.json";

/// Snapshot of a run: the effective seed, the resolved config path, and
/// every artifact the run produced. Re-running the referenced config in a
/// fresh directory reproduces the metrics byte for byte.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub code_version: String,
    pub created_unix: u64,
    pub seed: u64,
    pub config: String,
    pub artifacts: BTreeMap<String, String>,
    #[serde(default)]
    pub final_eval_reward: Option<f64>,
}

impl RunManifest {
    pub fn new(seed: u64) -> Self {
        let created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            format: MANIFEST_FORMAT.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            created_unix,
            seed,
            config: "config.json".to_string(),
            artifacts: BTreeMap::new(),
            final_eval_reward: None,
        }
    }

    pub fn record(&mut self, kind: &str, rel_path: &str) {
        self.artifacts.insert(kind.to_string(), rel_path.to_string());
    }

    /// Writes the manifest; refuses to clobber an existing run directory.
    pub fn write_new(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join(MANIFEST_NAME);
        if path.exists() {
            bail!(
                "{} already contains a manifest; refusing to overwrite a finished run",
                out_dir.display()
            );
        }
        std::fs::write(&path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(out_dir: &Path) -> Result<Self> {
        let path = out_dir.join(MANIFEST_NAME);
        let raw =
            std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let m: RunManifest = serde_json::from_str(&raw)?;
        if m.format != MANIFEST_FORMAT {
            bail!("unsupported manifest format {:?}", m.format);
        }
        Ok(m)
    }
}
