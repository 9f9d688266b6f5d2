//! Output plumbing: every file carries the config hash, the effective
//! seed, and the code version, and all numbers are written in shortest
//! round-trip decimal form so re-runs are byte-comparable.

use crate::config::Loaded;
use anyhow::{Context, Result};
use std::fs;
use std::path::PathBuf;

/// The provenance header embedded in every output file.
pub fn comment_header(loaded: &Loaded) -> String {
    format!(
        "# config_hash = {}\n# seed = {}\n# version = {}\n",
        loaded.hash,
        loaded.seed,
        env!("CARGO_PKG_VERSION")
    )
}

/// Writes `body` under the output directory with the provenance header
/// prepended, creating the directory if needed. Returns the full path.
pub fn write_with_header(loaded: &Loaded, name: &str, body: &str) -> Result<PathBuf> {
    fs::create_dir_all(&loaded.out_dir)
        .with_context(|| format!("cannot create {}", loaded.out_dir.display()))?;
    let path = loaded.out_dir.join(name);
    let content = format!("{}{body}", comment_header(loaded));
    fs::write(&path, content).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(path)
}

/// Writes a JSON document under the output directory. JSON cannot carry
/// comment lines, so the caller embeds the provenance as leading fields.
pub fn write_json(loaded: &Loaded, name: &str, value: &serde_json::Value) -> Result<PathBuf> {
    fs::create_dir_all(&loaded.out_dir)
        .with_context(|| format!("cannot create {}", loaded.out_dir.display()))?;
    let path = loaded.out_dir.join(name);
    let mut content = serde_json::to_string_pretty(value).context("cannot serialize report")?;
    content.push('\n');
    fs::write(&path, content).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(path)
}

/// Shortest round-trip decimal form of a float.
pub fn fmt(v: f64) -> String {
    format!("{v}")
}
