//! Visual vocabularies, word histograms and cosine similarity.

pub mod kmeans;

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{put_string, ByteReader, FeatureSet, DESCRIPTOR_LEN};

pub use kmeans::{kmeans, KMeansOutcome, KMeansParams};

/// K descriptor-space centroids ("words").
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    centroids: Vec<f32>,
    k: usize,
    dim: usize,
    seed: u64,
    source_tag: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VocabularyParams {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
}

impl Default for VocabularyParams {
    fn default() -> Self {
        VocabularyParams {
            k: 20_000,
            seed: 1,
            max_iters: 100,
        }
    }
}

/// Non-zero descriptor vectors of all sets, flattened row-major.
fn pooled_vectors<'a>(sets: impl IntoIterator<Item = &'a FeatureSet>) -> Vec<f32> {
    let mut out = Vec::new();
    for fs in sets {
        for d in fs.descriptors.iter().filter(|d| !d.is_zero()) {
            out.extend_from_slice(&d.vector);
        }
    }
    out
}

/// Clusters every non-zero descriptor of `feature_sets` into at most `params.k` words.
///
/// Strength filtering is the caller's job; pass sets that already went
/// through `select_strongest`.
pub fn build_vocabulary<'a>(
    feature_sets: impl IntoIterator<Item = &'a FeatureSet>,
    params: &VocabularyParams,
    source_tag: &str,
) -> Result<Vocabulary> {
    Ok(build_vocabulary_traced(feature_sets, params, source_tag)?.0)
}

/// Like [`build_vocabulary`], also returning the clustering trace.
pub fn build_vocabulary_traced<'a>(
    feature_sets: impl IntoIterator<Item = &'a FeatureSet>,
    params: &VocabularyParams,
    source_tag: &str,
) -> Result<(Vocabulary, KMeansOutcome<f32>)> {
    if params.k < 1 {
        return Err(Error::InvalidArgument("vocabulary size must be at least 1".into()));
    }
    let points = pooled_vectors(feature_sets);
    if points.is_empty() {
        return Err(Error::NoDescriptors);
    }
    let outcome = kmeans(
        &points,
        DESCRIPTOR_LEN,
        &KMeansParams {
            k: params.k,
            seed: params.seed,
            max_iters: params.max_iters,
        },
    )?;
    log::debug!(
        "vocabulary `{source_tag}`: {} words from {} descriptors, {} iterations, converged={}",
        outcome.k,
        points.len() / DESCRIPTOR_LEN,
        outcome.iterations,
        outcome.converged
    );
    let vocab = Vocabulary {
        centroids: outcome.centroids.clone(),
        k: outcome.k,
        dim: DESCRIPTOR_LEN,
        seed: params.seed,
        source_tag: source_tag.to_string(),
    };
    Ok((vocab, outcome))
}

impl Vocabulary {
    pub fn from_centroids(centroids: Vec<f32>, dim: usize, seed: u64, source_tag: impl Into<String>) -> Result<Self> {
        if dim == 0 || centroids.is_empty() || !centroids.len().is_multiple_of(dim) {
            return Err(Error::InvalidArgument("centroid buffer does not hold whole rows".into()));
        }
        Ok(Vocabulary {
            k: centroids.len() / dim,
            centroids,
            dim,
            seed,
            source_tag: source_tag.into(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn nearest_word(&self, v: &[f32]) -> usize {
        kmeans::nearest_centroid(v, &self.centroids, self.dim)
    }
}

// Vocabulary file, little-endian:
//   magic b"XVOC", u32 version (1), u32 K, u32 dimension, u64 seed,
//   u32 tag length + UTF-8 tag, then K * dimension f32 row-major.
const VOCAB_MAGIC: &[u8; 4] = b"XVOC";
const VOCAB_VERSION: u32 = 1;

impl Vocabulary {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.source_tag.len() + self.centroids.len() * 4);
        out.extend_from_slice(VOCAB_MAGIC);
        out.extend_from_slice(&VOCAB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_string(&mut out, &self.source_tag);
        for v in &self.centroids {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Vocabulary> {
        let mut r = ByteReader::new(bytes, "vocabulary");
        if r.take(4)? != VOCAB_MAGIC {
            return Err(Error::format("vocabulary", "bad magic"));
        }
        let version = r.u32()?;
        if version != VOCAB_VERSION {
            return Err(Error::format("vocabulary", format!("unsupported version {version}")));
        }
        let k = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let seed = r.u64()?;
        let source_tag = r.string()?;
        if k == 0 || dim == 0 {
            return Err(Error::format("vocabulary", "empty vocabulary"));
        }
        let mut centroids = Vec::with_capacity(k * dim);
        for _ in 0..k * dim {
            centroids.push(r.f32()?);
        }
        r.finish()?;
        Ok(Vocabulary {
            centroids,
            k,
            dim,
            seed,
            source_tag,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vocabulary> {
        let path = path.as_ref();
        Vocabulary::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Word counts of one image over a vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct BowHistogram {
    pub image_id: String,
    pub counts: Vec<f64>,
}

impl BowHistogram {
    pub fn zeros(image_id: impl Into<String>, k: usize) -> Self {
        BowHistogram {
            image_id: image_id.into(),
            counts: vec![0.0; k],
        }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.counts.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    /// True when no descriptor was quantized.
    pub fn is_zero(&self) -> bool {
        self.counts.iter().all(|c| *c == 0.0)
    }

    /// Debug export: `# id` then one `index:count` line per non-zero bin.
    pub fn to_sparse_text(&self) -> String {
        let mut s = format!("# {}\n", self.image_id);
        for (i, c) in self.counts.iter().enumerate().filter(|(_, c)| **c != 0.0) {
            let _ = writeln!(s, "{i}:{c}");
        }
        s
    }
}

/// Assigns every non-zero descriptor to its nearest word.
///
/// Zero descriptors are skipped, so a flat or empty image yields the all-zero
/// histogram.
pub fn quantize(fs: &FeatureSet, vocab: &Vocabulary) -> Result<BowHistogram> {
    if vocab.dim != DESCRIPTOR_LEN {
        return Err(Error::LengthMismatch(DESCRIPTOR_LEN, vocab.dim));
    }
    let words: Vec<usize> = fs
        .descriptors
        .par_iter()
        .filter(|d| !d.is_zero())
        .map(|d| vocab.nearest_word(&d.vector))
        .collect();
    let mut h = BowHistogram::zeros(fs.image_id.clone(), vocab.k);
    for w in words {
        h.counts[w] += 1.0;
    }
    Ok(h)
}

/// `dot(a, b) / (|a| |b|)`, or 0 when either side is all zero.
pub fn cosine(h1: &BowHistogram, h2: &BowHistogram) -> Result<f64> {
    cosine_slices(&h1.counts, &h2.counts)
}

pub fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}
