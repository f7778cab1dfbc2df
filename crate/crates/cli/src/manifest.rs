//! Run manifests: one JSON record per output directory and invocation.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use time::format_description::well_known::Rfc3339;
use time::OffsetDateTime;

#[derive(Clone, Debug, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub command_line: Vec<String>,
    /// sha256 of the resolved arguments serialised as JSON.
    pub config_digest: String,
    pub seed: Option<u64>,
    pub threads: usize,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started: String,
    pub finished: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).with_context(|| format!("{}: cannot open", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).with_context(|| format!("{}: read failed", path.display()))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn now() -> String {
    OffsetDateTime::now_utc().format(&Rfc3339).unwrap_or_default()
}

fn digests(paths: &[PathBuf]) -> Result<Vec<FileDigest>> {
    paths
        .iter()
        .map(|p| Ok(FileDigest { path: p.clone(), sha256: sha256_file(p)? }))
        .collect()
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Collects what a subcommand read and wrote, then stamps every output
/// directory with `<command>.manifest.json`.
pub struct Recorder {
    command: &'static str,
    config_digest: String,
    seed: Option<u64>,
    started: String,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn new(command: &'static str, config: &impl Serialize, seed: Option<u64>) -> Result<Self> {
        let json = serde_json::to_vec(config)?;
        Ok(Recorder {
            command,
            config_digest: sha256_bytes(&json),
            seed,
            started: now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    pub fn output(&mut self, p: &Path) {
        self.outputs.push(p.to_path_buf());
    }

    pub fn finish(self) -> Result<Vec<PathBuf>> {
        let inputs = digests(&self.inputs)?;
        let outputs = digests(&self.outputs)?;
        let finished = now();
        let mut by_dir: BTreeMap<PathBuf, Vec<FileDigest>> = BTreeMap::new();
        for d in &outputs {
            by_dir.entry(parent_dir(&d.path)).or_default().push(d.clone());
        }
        let mut written = Vec::new();
        for (dir, outs) in by_dir {
            let m = RunManifest {
                tool: "disagg",
                version: env!("CARGO_PKG_VERSION"),
                command: self.command,
                command_line: std::env::args().collect(),
                config_digest: self.config_digest.clone(),
                seed: self.seed,
                threads: rayon::current_num_threads(),
                inputs: inputs.clone(),
                outputs: outs,
                started: self.started.clone(),
                finished: finished.clone(),
            };
            let path = dir.join(format!("{}.manifest.json", self.command));
            write_atomic(&path, &serde_json::to_vec_pretty(&m)?)?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("{}: cannot write", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("{}: cannot rename into place", path.display()))
}
