//! Run manifest: the resolved config plus every file a command produced,
//! keyed by path relative to the run directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cfrl::numerics::checkpoint::content_hash;
use cfrl::pipeline::ExperimentConfig;
use cfrl::Error;
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub kind: String,
    /// Hex SHA-256 of the file contents.
    pub hash: String,
    /// Artifacts this one was derived from.
    #[serde(default)]
    pub inputs: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub artifacts: BTreeMap<String, ArtifactEntry>,
    /// Wall-clock seconds per command.
    pub timings: BTreeMap<String, f64>,
    /// Metric files, a subset of `artifacts`.
    pub metrics: Vec<String>,
}

impl RunManifest {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        Ok(Self {
            format_version: MANIFEST_VERSION,
            config_hash: cfrl::env::dataset::config_hash(&config)?,
            config,
            artifacts: BTreeMap::new(),
            timings: BTreeMap::new(),
            metrics: Vec::new(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()).into());
        }
        let text = fs::read_to_string(path)?;
        let m: RunManifest = serde_json::from_str(&text).with_context(|| format!("reading manifest {}", path.display()))?;
        if m.format_version != MANIFEST_VERSION {
            bail!("manifest {} has unsupported version {}", path.display(), m.format_version);
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Records a file already written under `dir`.
    pub fn register(&mut self, dir: &Path, rel: &str, kind: &str, inputs: Vec<String>) -> Result<()> {
        let bytes = fs::read(dir.join(rel)).with_context(|| format!("hashing {rel}"))?;
        self.artifacts.insert(rel.to_string(), ArtifactEntry { kind: kind.to_string(), hash: content_hash(&bytes), inputs });
        Ok(())
    }

    /// Writes `bytes` to `dir/rel` and records it.
    pub fn put(&mut self, dir: &Path, rel: &str, kind: &str, bytes: &[u8], inputs: Vec<String>) -> Result<()> {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.register(dir, rel, kind, inputs)
    }

    /// Path of a listed artifact after checking that it exists and still
    /// matches its recorded hash.
    pub fn require(&self, dir: &Path, rel: &str) -> Result<PathBuf> {
        let path = dir.join(rel);
        let Some(entry) = self.artifacts.get(rel) else {
            return Err(Error::MissingArtifact(path).into());
        };
        if !path.exists() {
            return Err(Error::MissingArtifact(path).into());
        }
        let hash = content_hash(&fs::read(&path)?);
        if hash != entry.hash {
            return Err(Error::Corrupt { context: path.display().to_string(), detail: "content hash differs from the manifest".into() }.into());
        }
        Ok(path)
    }

    /// Listed artifacts whose path starts with `prefix`, in order.
    pub fn with_prefix(&self, prefix: &str) -> Vec<String> {
        self.artifacts.keys().filter(|k| k.starts_with(prefix)).cloned().collect()
    }
}
