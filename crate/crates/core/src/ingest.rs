//! Representation spaces on disk and the feature cache.
//!
//! A space is a directory of rasters named by pair id (`<pair_id>.png` or
//! `<pair_id>.pgm`). Files are visited in bytewise filename order.
//!
//! Cache layout: `<root>/<space>/<config hash>/<image id>.xfc`, where the
//! config hash is the SHA-256 of [`ExtractorConfig::canonical`] (first 16 hex
//! digits). Each entry is
//!
//! ```text
//! b"XFC1" | content key (32 bytes) | SHA-256 of payload (32 bytes) | payload
//! ```
//!
//! with the payload in the feature-set binary format. The content key hashes
//! the raster pixels, dimensions and full config, so an edited image or a
//! config change never reuses a stale entry; a checksum mismatch triggers a
//! recompute. Writes go to a temporary file that is renamed into place.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{extract_grid, ExtractorConfig, FeatureSet};
use crate::raster::{load_raster, log_transform, GrayRaster};

pub const CACHE_ENV: &str = "XMIR_CACHE_DIR";
const CACHE_MAGIC: &[u8; 4] = b"XFC1";
const EXTENSIONS: [&str; 2] = ["png", "pgm"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preprocess {
    None,
    LogTransform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceDescriptor {
    pub name: String,
    pub root: PathBuf,
    #[serde(default)]
    pub preprocessing: Vec<Preprocess>,
    #[serde(default)]
    pub expected_count: Option<usize>,
    #[serde(default)]
    pub bit_depth: Option<u8>,
}

impl SpaceDescriptor {
    pub fn new(name: impl Into<String>, root: impl Into<PathBuf>) -> Self {
        SpaceDescriptor {
            name: name.into(),
            root: root.into(),
            preprocessing: Vec::new(),
            expected_count: None,
            bit_depth: None,
        }
    }

    fn error(&self, message: impl Into<String>) -> Error {
        Error::Space {
            space: self.name.clone(),
            root: self.root.clone(),
            message: message.into(),
        }
    }
}

pub fn apply_preprocessing(r: GrayRaster, steps: &[Preprocess]) -> GrayRaster {
    steps.iter().fold(r, |r, step| match step {
        Preprocess::None => r,
        Preprocess::LogTransform => log_transform(&r),
    })
}

/// Supported raster files of a space as `(id, path)`, sorted by file name bytes.
pub fn list_space(sd: &SpaceDescriptor) -> Result<Vec<(String, PathBuf)>> {
    let dir = std::fs::read_dir(&sd.root).map_err(|e| Error::io(&sd.root, e))?;
    let mut files = Vec::new();
    for entry in dir {
        let entry = entry.map_err(|e| Error::io(&sd.root, e))?;
        let path = entry.path();
        let supported = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false);
        if supported && path.is_file() {
            files.push(path);
        }
    }
    files.sort_by(|a, b| {
        a.file_name()
            .map(|n| n.as_encoded_bytes())
            .cmp(&b.file_name().map(|n| n.as_encoded_bytes()))
    });
    if files.is_empty() {
        return Err(sd.error("no supported rasters found"));
    }
    if let Some(expected) = sd.expected_count {
        if files.len() != expected {
            return Err(sd.error(format!("expected {expected} rasters, found {}", files.len())));
        }
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(files.len());
    for path in files {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        if !seen.insert(stem.clone()) {
            return Err(sd.error(format!("duplicate stem `{stem}`")));
        }
        out.push((stem, path));
    }
    Ok(out)
}

pub fn load_entry(sd: &SpaceDescriptor, id: &str, path: &Path) -> Result<GrayRaster> {
    let r = load_raster(path, sd.bit_depth)?.with_id(id);
    Ok(apply_preprocessing(r, &sd.preprocessing))
}

/// Loads and preprocesses every raster of a space, in listing order.
pub fn scan_space(sd: &SpaceDescriptor) -> Result<Vec<GrayRaster>> {
    list_space(sd)?
        .iter()
        .map(|(id, path)| load_entry(sd, id, path))
        .collect()
}

/// A named collection of rasters keyed by pair id.
pub trait SpaceSource: Send + Sync {
    fn name(&self) -> &str;
    /// Pair ids in listing order.
    fn ids(&self) -> Vec<String>;
    fn load(&self, id: &str) -> Result<GrayRaster>;
}

/// Lazily loaded on-disk space.
#[derive(Clone, Debug)]
pub struct DiskSpace {
    descriptor: SpaceDescriptor,
    entries: BTreeMap<String, PathBuf>,
    order: Vec<String>,
}

impl DiskSpace {
    pub fn open(descriptor: SpaceDescriptor) -> Result<Self> {
        let listing = list_space(&descriptor)?;
        let order = listing.iter().map(|(id, _)| id.clone()).collect();
        Ok(DiskSpace {
            descriptor,
            entries: listing.into_iter().collect(),
            order,
        })
    }

    pub fn descriptor(&self) -> &SpaceDescriptor {
        &self.descriptor
    }
}

impl SpaceSource for DiskSpace {
    fn name(&self) -> &str {
        &self.descriptor.name
    }

    fn ids(&self) -> Vec<String> {
        self.order.clone()
    }

    fn load(&self, id: &str) -> Result<GrayRaster> {
        let path = self.entries.get(id).ok_or_else(|| Error::UnknownImage(id.to_string()))?;
        load_entry(&self.descriptor, id, path)
    }
}

/// Rasters held in memory.
#[derive(Clone, Debug, Default)]
pub struct MemorySpace {
    name: String,
    rasters: BTreeMap<String, GrayRaster>,
}

impl MemorySpace {
    pub fn new(name: impl Into<String>, rasters: impl IntoIterator<Item = GrayRaster>) -> Result<Self> {
        let name = name.into();
        let mut map = BTreeMap::new();
        for r in rasters {
            let id = r.id().to_string();
            if map.insert(id.clone(), r).is_some() {
                return Err(Error::DuplicateId(id));
            }
        }
        Ok(MemorySpace { name, rasters: map })
    }
}

impl SpaceSource for MemorySpace {
    fn name(&self) -> &str {
        &self.name
    }

    fn ids(&self) -> Vec<String> {
        self.rasters.keys().cloned().collect()
    }

    fn load(&self, id: &str) -> Result<GrayRaster> {
        self.rasters.get(id).cloned().ok_or_else(|| Error::UnknownImage(id.to_string()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

pub fn config_hash(cfg: &ExtractorConfig) -> String {
    hex(&sha256(&[cfg.canonical().as_bytes()])[..8])
}

/// Hash of raster content and extraction config.
pub fn content_key(r: &GrayRaster, cfg: &ExtractorConfig) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(cfg.canonical().as_bytes());
    h.update((r.width() as u64).to_le_bytes());
    h.update((r.height() as u64).to_le_bytes());
    for v in r.pixels() {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

/// Extraction front end that persists raw (unselected) grid features.
#[derive(Debug, Default)]
pub struct FeatureCache {
    root: Option<PathBuf>,
    extractions: AtomicUsize,
    hits: AtomicUsize,
}

impl FeatureCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FeatureCache {
            root: Some(root.into()),
            ..Default::default()
        }
    }

    /// Always extracts; nothing touches the disk.
    pub fn disabled() -> Self {
        FeatureCache::default()
    }

    /// Root from `XMIR_CACHE_DIR`, else `default_root`.
    pub fn from_env(default_root: impl Into<PathBuf>) -> Self {
        match std::env::var_os(CACHE_ENV) {
            Some(dir) if !dir.is_empty() => FeatureCache::new(PathBuf::from(dir)),
            _ => FeatureCache::new(default_root),
        }
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    /// Extractions performed so far (cache misses included).
    pub fn extractions(&self) -> usize {
        self.extractions.load(Ordering::Relaxed)
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn entry_path(&self, space: &str, cfg: &ExtractorConfig, image_id: &str) -> Option<PathBuf> {
        self.root
            .as_ref()
            .map(|root| root.join(space).join(config_hash(cfg)).join(format!("{image_id}.xfc")))
    }

    /// Raw grid features of `r`, from the cache when a valid entry exists.
    pub fn features(&self, space: &str, r: &GrayRaster, cfg: &ExtractorConfig) -> Result<FeatureSet> {
        let Some(path) = self.entry_path(space, cfg, r.id()) else {
            return self.extract(r, cfg);
        };
        let key = content_key(r, cfg);
        if let Ok(bytes) = std::fs::read(&path) {
            match decode_entry(&bytes, &key) {
                Some(fs) => {
                    self.hits.fetch_add(1, Ordering::Relaxed);
                    return Ok(fs);
                }
                None => log::warn!("stale or corrupt cache entry {}; recomputing", path.display()),
            }
        }
        let fs = self.extract(r, cfg)?;
        write_entry(&path, &key, &fs)?;
        Ok(fs)
    }

    fn extract(&self, r: &GrayRaster, cfg: &ExtractorConfig) -> Result<FeatureSet> {
        self.extractions.fetch_add(1, Ordering::Relaxed);
        extract_grid(r, cfg)
    }
}

fn decode_entry(bytes: &[u8], key: &[u8; 32]) -> Option<FeatureSet> {
    if bytes.len() < 68 || &bytes[..4] != CACHE_MAGIC || &bytes[4..36] != key {
        return None;
    }
    let payload = &bytes[68..];
    if sha256(&[payload]) != bytes[36..68] {
        return None;
    }
    FeatureSet::from_bytes(payload).ok()
}

/// Decodes a cache entry without its content key, checking magic and checksum.
pub fn read_cache_entry(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 68 || &bytes[..4] != CACHE_MAGIC {
        return Err(Error::format("cache entry", "bad magic"));
    }
    let key: [u8; 32] = bytes[4..36].try_into().expect("32-byte slice");
    decode_entry(&bytes, &key).ok_or_else(|| Error::format("cache entry", "checksum mismatch"))
}

fn write_entry(path: &Path, key: &[u8; 32], fs: &FeatureSet) -> Result<()> {
    let dir = path.parent().expect("cache entries live in a directory");
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let payload = fs.to_bytes();
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    let write = |f: &mut tempfile::NamedTempFile| -> std::io::Result<()> {
        f.write_all(CACHE_MAGIC)?;
        f.write_all(key)?;
        f.write_all(&sha256(&[&payload]))?;
        f.write_all(&payload)?;
        f.flush()
    };
    write(&mut tmp).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Raw grid features of every raster of `space`, in listing order.
pub fn cache_features(cache: &FeatureCache, space: &dyn SpaceSource, cfg: &ExtractorConfig) -> Result<Vec<FeatureSet>> {
    cfg.validate()?;
    space
        .ids()
        .par_iter()
        .map(|id| cache.features(space.name(), &space.load(id)?, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn write_space(dir: &Path, ids: &[&str]) {
        for (i, id) in ids.iter().enumerate() {
            synth::textured(i as u64, 72, 72).save_png16(dir.join(format!("{id}.png"))).unwrap();
        }
    }

    fn cfg() -> ExtractorConfig {
        ExtractorConfig {
            scales: vec![32],
            ..ExtractorConfig::default()
        }
    }

    #[test]
    fn scan_sorts_and_names_by_stem() {
        let dir = tempfile::tempdir().unwrap();
        write_space(dir.path(), &["b", "a"]);
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let rasters = scan_space(&SpaceDescriptor::new("s", dir.path())).unwrap();
        let ids: Vec<&str> = rasters.iter().map(|r| r.id()).collect();
        assert_eq!(ids, ["a", "b"]);
    }

    #[test]
    fn log_transform_preprocessing_composes() {
        let dir = tempfile::tempdir().unwrap();
        write_space(dir.path(), &["x"]);
        let plain = scan_space(&SpaceDescriptor::new("s", dir.path())).unwrap();
        let mut sd = SpaceDescriptor::new("s", dir.path());
        sd.preprocessing = vec![Preprocess::LogTransform];
        let logged = scan_space(&sd).unwrap();
        assert_eq!(logged[0], log_transform(&plain[0]));
    }

    #[test]
    fn scan_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(scan_space(&SpaceDescriptor::new("s", dir.path())), Err(Error::Space { .. })));
        write_space(dir.path(), &["a", "b"]);
        let mut sd = SpaceDescriptor::new("s", dir.path());
        sd.expected_count = Some(3);
        assert!(matches!(scan_space(&sd), Err(Error::Space { .. })));
        synth::textured(1, 8, 8)
            .save_png16(dir.path().join("dup.png"))
            .unwrap();
        std::fs::copy(dir.path().join("a.png"), dir.path().join("dup.pgm")).unwrap();
        assert!(scan_space(&SpaceDescriptor::new("s", dir.path())).is_err());
        assert!(scan_space(&SpaceDescriptor::new("s", dir.path().join("missing"))).is_err());
    }

    #[test]
    fn cache_reuses_and_invalidates() {
        let data = tempfile::tempdir().unwrap();
        let cache_dir = tempfile::tempdir().unwrap();
        write_space(data.path(), &["p", "q", "r"]);
        let space = DiskSpace::open(SpaceDescriptor::new("s", data.path())).unwrap();

        let cache = FeatureCache::new(cache_dir.path());
        let first = cache_features(&cache, &space, &cfg()).unwrap();
        assert_eq!(cache.extractions(), 3);

        let again = FeatureCache::new(cache_dir.path());
        let second = cache_features(&again, &space, &cfg()).unwrap();
        assert_eq!(again.extractions(), 0);
        assert_eq!(again.hits(), 3);
        assert_eq!(first, second);

        let fresh: Vec<FeatureSet> = scan_space(space.descriptor())
            .unwrap()
            .iter()
            .map(|r| extract_grid(r, &cfg()).unwrap())
            .collect();
        for (a, b) in fresh.iter().zip(&second) {
            assert_eq!(a.to_bytes(), b.to_bytes());
        }

        let wider = ExtractorConfig {
            grid_spacing: 16,
            ..cfg()
        };
        let third = FeatureCache::new(cache_dir.path());
        cache_features(&third, &space, &wider).unwrap();
        assert_eq!(third.extractions(), 3);
    }

    #[test]
    fn corrupt_entry_is_recomputed() {
        let cache_dir = tempfile::tempdir().unwrap();
        let r = synth::textured(3, 64, 64).with_id("img");
        let cache = FeatureCache::new(cache_dir.path());
        let fs = cache.features("s", &r, &cfg()).unwrap();
        let path = cache.entry_path("s", &cfg(), "img").unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        let again = FeatureCache::new(cache_dir.path());
        assert_eq!(again.features("s", &r, &cfg()).unwrap(), fs);
        assert_eq!(again.extractions(), 1);

        // Same id, different pixels: the content key changes.
        let other = synth::textured(4, 64, 64).with_id("img");
        let third = FeatureCache::new(cache_dir.path());
        assert_eq!(third.features("s", &other, &cfg()).unwrap(), extract_grid(&other, &cfg()).unwrap());
        assert_eq!(third.extractions(), 1);
    }

    #[test]
    fn content_key_is_content_addressed() {
        let a = synth::textured(1, 32, 32);
        let b = a.clone().with_id("renamed");
        assert_eq!(content_key(&a, &cfg()), content_key(&b, &cfg()));
        assert_ne!(content_key(&a, &cfg()), content_key(&synth::textured(2, 32, 32), &cfg()));
        assert_ne!(config_hash(&cfg()), config_hash(&ExtractorConfig::default()));
    }

    #[test]
    fn disabled_cache_always_extracts() {
        let cache = FeatureCache::disabled();
        let r = synth::textured(1, 64, 64);
        cache.features("s", &r, &cfg()).unwrap();
        cache.features("s", &r, &cfg()).unwrap();
        assert_eq!(cache.extractions(), 2);
        assert!(cache.entry_path("s", &cfg(), "x").is_none());
    }
}
