use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use cfrl::pipeline::ExperimentConfig;

/// Reads an experiment config; `.toml` files are parsed as TOML, anything
/// else as JSON. Unset keys take their defaults.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    if !path.exists() {
        return Err(cfrl::Error::MissingArtifact(path.to_path_buf()).into());
    }
    let text = fs::read_to_string(path)?;
    if text.trim().is_empty() {
        bail!("config file {} is empty", path.display());
    }
    let cfg: ExperimentConfig = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    };
    cfg.validate()?;
    Ok(cfg)
}
