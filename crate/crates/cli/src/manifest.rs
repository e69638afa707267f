use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Serialize)]
struct FileEntry {
    path: String,
    sha256: String,
    bytes: u64,
}

/// Run manifest: what was run, with which config, on which inputs, and a
/// content hash of every file produced. No timestamps, so reruns with the
/// same inputs produce the same manifest.
#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: Option<u64>,
    config_sha256: String,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<(String, u64)> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok((hex(&Sha256::digest(&bytes)), bytes.len() as u64))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn files_under(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn entry(path: &Path, shown: String) -> anyhow::Result<FileEntry> {
    let (sha256, bytes) = sha256_file(path)?;
    Ok(FileEntry {
        path: shown,
        sha256,
        bytes,
    })
}

/// Writes the resolved config before a command runs, so a failed run still
/// records what it was asked to do.
pub fn write_config(out: &Path, config: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(CONFIG_FILE), config.to_toml()?)?;
    Ok(())
}

/// Hashes `inputs` (files or directories) and everything already in `out`.
pub fn write_manifest(
    out: &Path,
    command: &str,
    config: &RunConfig,
    inputs: &[PathBuf],
) -> anyhow::Result<()> {
    let mut input_entries = Vec::new();
    for root in inputs {
        let files = if root.is_dir() {
            files_under(root)?
        } else {
            vec![root.clone()]
        };
        for f in files {
            input_entries.push(entry(&f, f.display().to_string())?);
        }
    }
    let mut outputs = Vec::new();
    for f in files_under(out)? {
        let rel = f.strip_prefix(out).unwrap_or(&f);
        if rel == Path::new(MANIFEST_FILE) || rel.starts_with("checkpoint") {
            continue;
        }
        outputs.push(entry(&f, rel.display().to_string())?);
    }
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed: config.seed,
        config_sha256: sha256_file(&out.join(CONFIG_FILE))?.0,
        inputs: input_entries,
        outputs,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(out.join(MANIFEST_FILE), text)?;
    Ok(())
}
