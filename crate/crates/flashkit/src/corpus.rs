//! Byte corpora.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// Synthetic English-like documents separated by `0x00`, about 1 MiB.
pub const SAMPLE: &[u8] = include_bytes!("../data/sample.txt");

/// Reads a file as raw bytes.
pub fn load_corpus(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).with_context(|| format!("reading corpus {}", path.display()))?;
    if bytes.is_empty() {
        bail!("corpus empty: {}", path.display());
    }
    Ok(bytes)
}

/// The file at `path`, or the bundled sample when `None`.
pub fn load_or_sample(path: Option<&Path>) -> Result<Vec<u8>> {
    match path {
        Some(p) => load_corpus(p),
        None => Ok(SAMPLE.to_vec()),
    }
}

pub fn write_corpus(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing corpus {}", path.display()))
}
