//! Run directories and the manifest written next to every run's outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const DATA_DIR_ENV: &str = "RETROMAE_DATA_DIR";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Relative inputs that do not exist under the working directory are looked
/// up under the data directory.
pub fn resolve_input(p: &Path) -> PathBuf {
    if p.is_relative() && !p.exists() {
        let alt = data_dir().join(p);
        if alt.exists() {
            return alt;
        }
    }
    p.to_path_buf()
}

/// `--out-dir` if given, else `<data dir>/runs/<command>-<unix time>-seed<seed>`.
pub fn run_dir(out_dir: Option<&Path>, command: &str, seed: u64) -> Result<PathBuf> {
    let dir = match out_dir {
        Some(d) => d.to_path_buf(),
        None => {
            let base = data_dir().join("runs").join(format!("{command}-{}-seed{seed}", unix_now()));
            let mut dir = base.clone();
            let mut n = 1;
            while dir.exists() {
                dir = PathBuf::from(format!("{}-{n}", base.display()));
                n += 1;
            }
            dir
        }
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating run directory {}", dir.display()))?;
    Ok(dir)
}

/// Git-style content hash: SHA-256 over `blob <len>\0<bytes>`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Files hash as blobs; directories hash their sorted `name hash` lines.
pub fn content_hash(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        let mut listing = String::new();
        for e in entries {
            let name = e.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            listing.push_str(&format!("{name} {}\n", content_hash(&e)?));
        }
        let mut h = Sha256::new();
        h.update(format!("tree {}\0", listing.len()));
        h.update(listing);
        Ok(hex::encode(h.finalize()))
    } else {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(blob_hash(&bytes))
    }
}

#[derive(Debug, Serialize)]
pub struct InputRecord {
    pub path: String,
    pub hash: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<String>,
    /// Hash over the input hashes, in order.
    pub inputs_hash: String,
    pub started_at: u64,
    pub finished_at: u64,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, started_at: u64) -> Self {
        Self {
            command: command.into(),
            config: BTreeMap::new(),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            inputs_hash: String::new(),
            started_at,
            finished_at: started_at,
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(InputRecord {
            path: path.display().to_string(),
            hash: content_hash(path)?,
        });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(mut self, dir: &Path) -> Result<PathBuf> {
        let joined: String = self.inputs.iter().map(|i| format!("{}\n", i.hash)).collect();
        self.inputs_hash = blob_hash(joined.as_bytes());
        self.finished_at = unix_now();
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
