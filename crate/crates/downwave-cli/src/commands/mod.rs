//! Subcommand implementations plus small shared file-layout helpers.
//!
//! Dataset files follow a fixed naming scheme: `<stem>.hr.wgf1` (truth),
//! `<stem>.lr.wgf1` (coarse input), `<stem>.sr.wgf1` / `<stem>.sr.pgm`
//! (super-resolved output). The stem identifies a pair across directories.

pub mod bench;
pub mod evaluate;
pub mod gen_data;
pub mod sample;
pub mod train;

use std::path::{Path, PathBuf};

use downwave_core::{CoreError, Result};

/// Lists files in `dir` whose names end with `suffix` (e.g. `.lr.wgf1`),
/// sorted by name, returned as (stem, path) with the suffix stripped.
pub fn list_with_suffix(dir: &Path, suffix: &str) -> Result<Vec<(String, PathBuf)>> {
    if !dir.is_dir() {
        return Err(CoreError::Config(format!(
            "directory not found: {}",
            dir.display()
        )));
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(stem) = name.strip_suffix(suffix) {
            out.push((stem.to_string(), path.clone()));
        }
    }
    out.sort();
    Ok(out)
}

/// Formats a list of missing identifiers for unmatched-pair errors.
pub fn format_missing(label: &str, ids: &[String]) -> String {
    format!("missing {label} for: {}", ids.join(", "))
}
