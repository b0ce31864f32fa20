//! Spectrogram cache keyed by WAV content and frontend settings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::audio::{decode_wav, spectrogram_of, FrontendConfig, MelFrontend, MelSpectrogram};
use crate::error::{Error, Result};
use crate::sampling::{parse_manifest, Manifest};
use crate::training::Dataset;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PrepareReport {
    pub written: usize,
    pub skipped: usize,
    /// `path: reason` for every file that could not be processed.
    pub failed: Vec<String>,
}

/// Manifest plus the absolute location of each row's audio (relative rows
/// resolve against the manifest's directory).
pub fn read_manifest(path: &Path) -> Result<(Manifest, Vec<PathBuf>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest = parse_manifest(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let sources = manifest.samples().iter().map(|s| base.join(&s.source)).collect();
    Ok((manifest, sources))
}

pub fn cache_path(cache_dir: &Path, source: &Path) -> PathBuf {
    let digest = Sha256::digest(source.to_string_lossy().as_bytes());
    cache_dir.join(format!("{}.mel", hex(&digest[..16])))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the WAV bytes and every frontend setting that changes the
/// spectrogram (the crop length does not).
fn content_hash(wav: &[u8], cfg: &FrontendConfig) -> String {
    let mut key = cfg.clone();
    key.sample_length = 0.0;
    let mut h = Sha256::new();
    h.update(wav);
    h.update(serde_json::to_vec(&key).expect("frontend config serializes"));
    hex(&h.finalize())
}

enum Outcome {
    Written,
    Skipped,
}

fn prepare_one(source: &Path, cache_dir: &Path, frontend: &MelFrontend, cfg: &FrontendConfig) -> Result<Outcome> {
    let bytes = std::fs::read(source).map_err(|e| Error::io(source, e))?;
    let hash = content_hash(&bytes, cfg);
    let target = cache_path(cache_dir, source);
    if let Ok((_, meta)) = MelSpectrogram::load(&target) {
        if meta.get("content_hash") == Some(&hash) {
            return Ok(Outcome::Skipped);
        }
    }
    let audio = decode_wav(&bytes)?;
    let spec = spectrogram_of(audio, &source.display().to_string(), frontend, cfg)?;
    let meta = BTreeMap::from([("content_hash".to_string(), hash)]);
    spec.save(&target, &meta)?;
    Ok(Outcome::Written)
}

/// Compute missing or stale caches in parallel. Per-file failures are
/// collected in the report rather than stopping the run.
pub fn prepare(manifest_path: &Path, cfg: &FrontendConfig, cache_dir: &Path) -> Result<PrepareReport> {
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    let (_, mut sources) = read_manifest(manifest_path)?;
    sources.sort();
    sources.dedup();
    std::fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    let frontend = MelFrontend::new(cfg);
    let outcomes: Vec<Result<Outcome>> = sources
        .par_iter()
        .map(|s| prepare_one(s, cache_dir, &frontend, cfg))
        .collect();
    let mut report = PrepareReport::default();
    for (src, o) in sources.iter().zip(outcomes) {
        match o {
            Ok(Outcome::Written) => report.written += 1,
            Ok(Outcome::Skipped) => report.skipped += 1,
            Err(e) => report.failed.push(format!("{}: {e}", src.display())),
        }
    }
    Ok(report)
}

/// Prepare (if needed) and load every manifest row as a floor-normalized
/// spectrogram.
pub fn load_dataset(manifest_path: &Path, cfg: &FrontendConfig, cache_dir: &Path) -> Result<Dataset> {
    let report = prepare(manifest_path, cfg, cache_dir)?;
    if !report.failed.is_empty() {
        return Err(Error::Files(report.failed));
    }
    let (manifest, sources) = read_manifest(manifest_path)?;
    let specs = manifest
        .samples()
        .iter()
        .zip(&sources)
        .map(|(s, path)| {
            let (spec, _) = MelSpectrogram::load(&cache_path(cache_dir, path))?;
            let mut spec = spec.floor_normalized(cfg.log_floor);
            spec.source_id = s.source.clone();
            Ok(spec)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(manifest, specs)
}
