//! Experiment manifest: an ordered record of every command run, with input
//! and output file hashes, so a pipeline can be hash-verified or replayed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use rhawk_core::hashing::fnv1a64_hex;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Subcommand name.
    pub command: String,
    /// The typed command arguments, replayable.
    pub args: serde_json::Value,
    /// Input path -> content hash at run time.
    pub inputs: BTreeMap<String, String>,
    /// Output path -> content hash after the run.
    pub outputs: BTreeMap<String, String>,
    /// Crate version that produced the entry.
    pub version: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    pub fn load_or_default(path: &Path) -> Result<Manifest> {
        if path.exists() {
            Manifest::load(path)
        } else {
            Ok(Manifest::default())
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).with_context(|| format!("writing manifest {}", path.display()))?;
        Ok(())
    }
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(fnv1a64_hex(&bytes))
}

fn hash_paths(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for p in paths {
        out.insert(p.display().to_string(), hash_file(p)?);
    }
    Ok(out)
}

/// Append one entry to the manifest next to the command's outputs.
pub fn record(
    manifest_path: &Path,
    command: &str,
    args: serde_json::Value,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<()> {
    let mut manifest = Manifest::load_or_default(manifest_path)?;
    manifest.entries.push(ManifestEntry {
        command: command.to_string(),
        args,
        inputs: hash_paths(inputs)?,
        outputs: hash_paths(outputs)?,
        version: env!("CARGO_PKG_VERSION").to_string(),
    });
    manifest.save(manifest_path)
}

/// Hash-verify every file recorded in the manifest against disk.
/// Returns human-readable per-entry lines; errors on the first structural
/// problem, collects content mismatches.
pub fn verify_hashes(manifest: &Manifest) -> Result<(Vec<String>, usize)> {
    let mut lines = Vec::new();
    let mut mismatches = 0usize;
    for (i, entry) in manifest.entries.iter().enumerate() {
        let mut entry_ok = true;
        for (path, want) in entry.inputs.iter().chain(entry.outputs.iter()) {
            let p = PathBuf::from(path);
            if !p.exists() {
                lines.push(format!("[MISSING] step {i} {}: {path}", entry.command));
                entry_ok = false;
                mismatches += 1;
                continue;
            }
            let got = hash_file(&p)?;
            if &got != want {
                lines.push(format!(
                    "[MISMATCH] step {i} {}: {path} hash {got} != recorded {want}",
                    entry.command
                ));
                entry_ok = false;
                mismatches += 1;
            }
        }
        if entry_ok {
            lines.push(format!("[OK] step {i} {}", entry.command));
        }
    }
    Ok((lines, mismatches))
}

/// Remaps original output paths into a replay working directory,
/// preserving directory structure under the workdir root.
pub struct PathMap {
    workdir: PathBuf,
    map: BTreeMap<PathBuf, PathBuf>,
}

impl PathMap {
    pub fn new(workdir: PathBuf) -> PathMap {
        PathMap {
            workdir,
            map: BTreeMap::new(),
        }
    }

    /// Replay location for an output path; registered so later stages that
    /// consume it as input get the replayed copy.
    pub fn alloc_output(&mut self, original: &Path) -> Result<PathBuf> {
        let rel: PathBuf = original
            .components()
            .filter(|c| matches!(c, std::path::Component::Normal(_)))
            .collect();
        let target = self.workdir.join(rel);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
        self.map.insert(original.to_path_buf(), target.clone());
        Ok(target)
    }

    /// Input resolution: the replayed copy when an earlier stage produced
    /// it, otherwise the original path.
    pub fn resolve_input(&self, original: &Path) -> Result<PathBuf> {
        if let Some(mapped) = self.map.get(original) {
            return Ok(mapped.clone());
        }
        if !original.exists() {
            bail!(
                "replay input {} neither produced by an earlier stage nor present on disk",
                original.display()
            );
        }
        Ok(original.to_path_buf())
    }

    pub fn replayed_output(&self, original: &Path) -> Option<&PathBuf> {
        self.map.get(original)
    }
}
