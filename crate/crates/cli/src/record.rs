//! `run.json`: the resolved config, the seed and SHA-256 digests of every
//! input and output, enough to repeat a run and check the result.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub argv: Vec<String>,
    pub version: &'static str,
    pub seed: u64,
    /// Every config key with its resolved value.
    pub config: BTreeMap<String, String>,
    /// Digests of the files read, keyed by path as given.
    pub inputs: BTreeMap<String, String>,
    /// Digests of the files written, keyed by path relative to the output
    /// directory.
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Digest of a dataset directory: the manifest plus every file it names,
/// in manifest order.
pub fn sha256_dataset(dir: &Path) -> Result<String> {
    let records = afcl_core::synth::read_manifest(dir)?;
    let mut h = Sha256::new();
    h.update(fs::read(dir.join(afcl_core::synth::MANIFEST_FILE))?);
    for r in records {
        for rel in [&r.image, &r.mask] {
            let p = dir.join(rel);
            h.update(fs::read(&p).with_context(|| format!("reading {}", p.display()))?);
        }
    }
    Ok(format!("{:x}", h.finalize()))
}

impl RunRecord {
    pub fn new(command: &str, seed: u64, config: impl IntoIterator<Item = (String, String)>) -> Self {
        Self {
            command: command.into(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config: config.into_iter().collect(),
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn input_file(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn input_dataset(&mut self, dir: &Path) -> Result<()> {
        self.inputs.insert(dir.display().to_string(), sha256_dataset(dir)?);
        Ok(())
    }

    /// Hashes every regular file under `out` (except `run.json` itself) and
    /// writes the record there.
    pub fn finish(mut self, out: &Path) -> Result<()> {
        let mut files = Vec::new();
        collect_files(out, &mut files)?;
        files.sort();
        for f in files {
            let rel = f.strip_prefix(out).unwrap_or(&f);
            if rel == Path::new(RUN_FILE) {
                continue;
            }
            let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            self.artifacts.insert(key, sha256_file(&f)?);
        }
        let json = serde_json::to_string_pretty(&self)?;
        fs::write(out.join(RUN_FILE), json + "\n").context("writing run.json")?;
        Ok(())
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else if p.is_file() {
            out.push(p);
        }
    }
    Ok(())
}
