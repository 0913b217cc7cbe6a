//! Corpus generation and the on-disk layout: `manifest.jsonl` plus
//! `images/<id>.ppm` and `masks/<id>.pgm`, paths stored relative to the
//! manifest directory.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::{load_pgm, load_ppm, save_pgm, save_ppm};
use crate::rng::derive_seed;

use super::{generate, GenParams, ImageSample, Kind};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub kind: Kind,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct CorpusSpec {
    pub root_seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Ids are `<prefix>-<index>`, zero padded to four digits.
    pub prefix: String,
    /// Kinds assigned round-robin by index.
    pub kinds: Vec<Kind>,
    pub params: GenParams,
}

impl CorpusSpec {
    pub fn new(root_seed: u64, count: usize, size: usize, prefix: &str) -> Self {
        Self {
            root_seed,
            count,
            height: size,
            width: size,
            prefix: prefix.into(),
            kinds: Kind::MANIPULATIONS.to_vec(),
            params: GenParams::default(),
        }
    }
}

/// Each sample's seed depends only on the root seed and its id, so any
/// subset can be regenerated independently.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<ImageSample>> {
    if spec.kinds.is_empty() {
        return Err(invalid("corpus needs at least one kind"));
    }
    (0..spec.count)
        .map(|i| {
            let id = format!("{}-{i:04}", spec.prefix);
            let seed = derive_seed(spec.root_seed, &id);
            let kind = spec.kinds[i % spec.kinds.len()];
            let mut s = generate(kind, seed, spec.height, spec.width, &spec.params)?;
            s.id = id;
            Ok(s)
        })
        .collect()
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.') && !id.starts_with('.')
}

/// Writes images, masks and the manifest. Pixel values are rounded to 8
/// bits on the way out.
pub fn write_dataset(samples: &[ImageSample], dir: &Path) -> Result<Vec<ManifestRecord>> {
    let mut seen = HashSet::new();
    for s in samples {
        if !valid_id(&s.id) {
            return Err(invalid(format!("sample id `{}` is not filename-safe", s.id)));
        }
        if !seen.insert(s.id.as_str()) {
            return Err(invalid(format!("duplicate sample id `{}`", s.id)));
        }
    }
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut records = Vec::with_capacity(samples.len());
    let mut manifest = BufWriter::new(fs::File::create(dir.join(MANIFEST_FILE))?);
    for s in samples {
        let rec = ManifestRecord {
            id: s.id.clone(),
            image: format!("images/{}.ppm", s.id),
            mask: format!("masks/{}.pgm", s.id),
            kind: s.kind,
            seed: s.seed,
        };
        save_ppm(&dir.join(&rec.image), &s.image)?;
        save_pgm(&dir.join(&rec.mask), &s.mask)?;
        serde_json::to_writer(&mut manifest, &rec)?;
        manifest.write_all(b"\n")?;
        records.push(rec);
    }
    manifest.flush()?;
    Ok(records)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let f = fs::File::open(dir.join(MANIFEST_FILE))?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            what: "manifest",
            detail: format!("line {}: {e}", n + 1),
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Format {
                what: "manifest",
                detail: format!("duplicate id `{}`", rec.id),
            });
        }
        records.push(rec);
    }
    Ok(records)
}

fn resolve(dir: &Path, id: &str, rel: &str) -> Result<PathBuf> {
    let p = dir.join(rel);
    if !p.is_file() {
        return Err(Error::MissingFile { id: id.into(), path: p });
    }
    Ok(p)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<ImageSample>> {
    let records = read_manifest(dir)?;
    records
        .iter()
        .map(|r| {
            let image = load_ppm(&resolve(dir, &r.id, &r.image)?)?;
            let mask = load_pgm(&resolve(dir, &r.id, &r.mask)?)?;
            ImageSample::new(r.id.clone(), r.kind, image, mask, r.seed)
        })
        .collect()
}
