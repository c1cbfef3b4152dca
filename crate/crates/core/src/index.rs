//! Immutable histogram repository and cosine ranking.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rayon::prelude::*;

use crate::bow::{cosine_slices, quantize, BowHistogram, Vocabulary};
use crate::error::{Error, Result};
use crate::features::{extract_selected, put_string, ByteReader, ExtractorConfig, FeatureSet};
use crate::raster::GrayRaster;

pub const VOCABULARY_FILE: &str = "vocabulary.bin";
pub const HISTOGRAMS_FILE: &str = "histograms.bin";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Weighting {
    /// Raw word counts.
    #[default]
    Counts,
    /// Counts scaled by `ln(N / df)` computed over the repository.
    TfIdf,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Layout {
    #[default]
    Dense,
    Sparse,
}

#[derive(Clone, Debug, Default)]
pub struct IndexOptions {
    /// Representation space of the repository; defaults to the vocabulary tag.
    pub repo_tag: Option<String>,
    pub allow_tag_mismatch: bool,
    pub weighting: Weighting,
    pub layout: Layout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    vocabulary: Vocabulary,
    entries: Vec<BowHistogram>,
    repo_tag: String,
    config: ExtractorConfig,
    weighting: Weighting,
    layout: Layout,
    idf: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedItem {
    pub image_id: String,
    pub similarity: f64,
}

/// Results ordered by similarity (descending), then image id (ascending).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RankedList {
    pub query_id: String,
    pub items: Vec<RankedItem>,
    /// The query quantized to the all-zero histogram; every score is 0.
    pub zero_query: bool,
}

impl RankedList {
    pub fn from_scores(query_id: impl Into<String>, mut items: Vec<RankedItem>) -> Self {
        sort_items(&mut items);
        RankedList {
            query_id: query_id.into(),
            items,
            zero_query: false,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// 1-based position of `image_id`.
    pub fn rank_of(&self, image_id: &str) -> Option<usize> {
        self.items.iter().position(|i| i.image_id == image_id).map(|p| p + 1)
    }

    pub fn ids(&self) -> Vec<&str> {
        self.items.iter().map(|i| i.image_id.as_str()).collect()
    }

    pub fn truncated(&self, n: usize) -> RankedList {
        RankedList {
            query_id: self.query_id.clone(),
            items: self.items.iter().take(n).cloned().collect(),
            zero_query: self.zero_query,
        }
    }

    /// CSV with header `rank,image_id,similarity`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["rank", "image_id", "similarity"]).expect("in-memory write");
        for (i, item) in self.items.iter().enumerate() {
            w.write_record([(i + 1).to_string(), item.image_id.clone(), format!("{:.17}", item.similarity)])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
    }

    /// Parses [`RankedList::to_csv`] output, checking ranks and ordering.
    pub fn from_csv(query_id: impl Into<String>, text: &str) -> Result<RankedList> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let headers = r.headers().map_err(|e| Error::format("ranked list", e.to_string()))?;
        if headers.iter().collect::<Vec<_>>() != ["rank", "image_id", "similarity"] {
            return Err(Error::format("ranked list", "unexpected header"));
        }
        let mut items = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::format("ranked list", e.to_string()))?;
            let rank: usize = rec[0].parse().map_err(|_| Error::format("ranked list", "bad rank"))?;
            if rank != i + 1 {
                return Err(Error::format("ranked list", format!("rank {rank} at row {}", i + 1)));
            }
            let similarity: f64 = rec[2].parse().map_err(|_| Error::format("ranked list", "bad similarity"))?;
            items.push(RankedItem {
                image_id: rec[1].to_string(),
                similarity,
            });
        }
        let list = RankedList {
            query_id: query_id.into(),
            items,
            zero_query: false,
        };
        list.validate()?;
        Ok(list)
    }

    /// Checks the ordering contract and id uniqueness.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for item in &self.items {
            if !seen.insert(item.image_id.as_str()) {
                return Err(Error::DuplicateId(item.image_id.clone()));
            }
        }
        for w in self.items.windows(2) {
            if item_order(&w[0], &w[1]) == std::cmp::Ordering::Greater {
                return Err(Error::format("ranked list", "items out of order"));
            }
        }
        Ok(())
    }
}

fn item_order(a: &RankedItem, b: &RankedItem) -> std::cmp::Ordering {
    b.similarity.total_cmp(&a.similarity).then_with(|| a.image_id.cmp(&b.image_id))
}

pub(crate) fn sort_items(items: &mut [RankedItem]) {
    items.sort_by(item_order);
}

impl RetrievalIndex {
    /// Extracts, filters and quantizes every repository raster.
    pub fn build(
        rasters: &[GrayRaster],
        cfg: &ExtractorConfig,
        vocabulary: Vocabulary,
        opts: &IndexOptions,
    ) -> Result<RetrievalIndex> {
        cfg.validate()?;
        let sets = rasters
            .iter()
            .map(|r| extract_selected(r, cfg))
            .collect::<Result<Vec<_>>>()?;
        RetrievalIndex::from_feature_sets(&sets, cfg, vocabulary, opts)
    }

    /// Builds from already strength-filtered feature sets.
    pub fn from_feature_sets(
        sets: &[FeatureSet],
        cfg: &ExtractorConfig,
        vocabulary: Vocabulary,
        opts: &IndexOptions,
    ) -> Result<RetrievalIndex> {
        if sets.is_empty() {
            return Err(Error::EmptyRepository);
        }
        let repo_tag = opts
            .repo_tag
            .clone()
            .unwrap_or_else(|| vocabulary.source_tag().to_string());
        if repo_tag != vocabulary.source_tag() && !opts.allow_tag_mismatch {
            return Err(Error::TagMismatch {
                vocab: vocabulary.source_tag().to_string(),
                repo: repo_tag,
            });
        }
        let mut seen = HashSet::new();
        for fs in sets {
            if !seen.insert(fs.image_id.as_str()) {
                return Err(Error::DuplicateId(fs.image_id.clone()));
            }
        }
        let entries = sets
            .iter()
            .map(|fs| quantize(fs, &vocabulary))
            .collect::<Result<Vec<_>>>()?;
        let idf = match opts.weighting {
            Weighting::Counts => None,
            Weighting::TfIdf => Some(inverse_document_frequency(&entries, vocabulary.k())),
        };
        Ok(RetrievalIndex {
            vocabulary,
            entries,
            repo_tag,
            config: cfg.clone(),
            weighting: opts.weighting,
            layout: opts.layout,
            idf,
        })
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn entries(&self) -> &[BowHistogram] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn repo_tag(&self) -> &str {
        &self.repo_tag
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn weighting(&self) -> Weighting {
        self.weighting
    }

    pub fn entry(&self, image_id: &str) -> Option<&BowHistogram> {
        self.entries.iter().find(|e| e.image_id == image_id)
    }

    fn weighted(&self, counts: &[f64]) -> Vec<f64> {
        match &self.idf {
            None => counts.to_vec(),
            Some(idf) => counts.iter().zip(idf).map(|(c, w)| c * w).collect(),
        }
    }

    /// Featurizes `q` with `cfg` and ranks the repository against it.
    ///
    /// Queries from another modality are still quantized against this
    /// repository's vocabulary.
    pub fn query(&self, q: &GrayRaster, cfg: &ExtractorConfig, top_n: usize) -> Result<RankedList> {
        let fs = extract_selected(q, cfg)?;
        self.query_features(&fs, top_n)
    }

    pub fn query_features(&self, fs: &FeatureSet, top_n: usize) -> Result<RankedList> {
        let h = quantize(fs, &self.vocabulary)?;
        self.query_histogram(&h, top_n)
    }

    pub fn query_histogram(&self, h: &BowHistogram, top_n: usize) -> Result<RankedList> {
        if top_n < 1 {
            return Err(Error::InvalidArgument("top_n must be at least 1".into()));
        }
        if h.len() != self.vocabulary.k() {
            return Err(Error::LengthMismatch(h.len(), self.vocabulary.k()));
        }
        let qv = self.weighted(&h.counts);
        let mut items: Vec<RankedItem> = self
            .entries
            .par_iter()
            .map(|e| {
                let ev = self.weighted(&e.counts);
                Ok(RankedItem {
                    image_id: e.image_id.clone(),
                    similarity: cosine_slices(&qv, &ev)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        sort_items(&mut items);
        items.truncate(top_n);
        Ok(RankedList {
            query_id: h.image_id.clone(),
            items,
            zero_query: h.is_zero(),
        })
    }
}

fn inverse_document_frequency(entries: &[BowHistogram], k: usize) -> Vec<f64> {
    let n = entries.len() as f64;
    (0..k)
        .map(|w| {
            let df = entries.iter().filter(|e| e.counts[w] > 0.0).count();
            if df == 0 {
                0.0
            } else {
                (n / df as f64).ln()
            }
        })
        .collect()
}

/// Percentage of queries whose true image is among their first `k` results.
pub fn topk_success(ranked: &[RankedList], truth: &BTreeMap<String, String>, k: usize) -> Result<f64> {
    if ranked.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for list in ranked {
        let want = truth
            .get(&list.query_id)
            .ok_or_else(|| Error::MissingTruth(list.query_id.clone()))?;
        if list.items.iter().take(k).any(|i| &i.image_id == want) {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / ranked.len() as f64)
}

/// Success percentage from 1-based ranks (`None` = not retrieved).
pub fn success_from_ranks<'a>(ranks: impl IntoIterator<Item = &'a Option<usize>>, k: usize) -> f64 {
    let (mut n, mut hits) = (0usize, 0usize);
    for r in ranks {
        n += 1;
        if matches!(r, Some(r) if *r <= k) {
            hits += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        100.0 * hits as f64 / n as f64
    }
}

// Histogram table, little-endian:
//   magic b"XIDX", u32 version (1), u32 K, u32 entry count,
//   u8 layout (0 dense, 1 sparse), u8 weighting (0 counts, 1 tf-idf),
//   u32-length-prefixed repo tag,
//   extractor config: u32 grid spacing, u32 scale count, u32 scales..., u8 upright, f64 fraction,
//   if tf-idf: K f64 idf weights,
//   per entry: u32-length-prefixed id, then either K f32 counts (dense) or
//   u32 nnz followed by nnz (u32 word, f32 count) pairs (sparse).
const INDEX_MAGIC: &[u8; 4] = b"XIDX";
const INDEX_VERSION: u32 = 1;

impl RetrievalIndex {
    pub fn histograms_to_bytes(&self) -> Vec<u8> {
        let k = self.vocabulary.k();
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(k as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        out.push(matches!(self.layout, Layout::Sparse) as u8);
        out.push(matches!(self.weighting, Weighting::TfIdf) as u8);
        put_string(&mut out, &self.repo_tag);
        out.extend_from_slice(&(self.config.grid_spacing as u32).to_le_bytes());
        out.extend_from_slice(&(self.config.scales.len() as u32).to_le_bytes());
        for s in &self.config.scales {
            out.extend_from_slice(&(*s as u32).to_le_bytes());
        }
        out.push(self.config.upright as u8);
        out.extend_from_slice(&self.config.strongest_fraction.to_le_bytes());
        if let Some(idf) = &self.idf {
            for w in idf {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        for e in &self.entries {
            put_string(&mut out, &e.image_id);
            match self.layout {
                Layout::Dense => {
                    for c in &e.counts {
                        out.extend_from_slice(&(*c as f32).to_le_bytes());
                    }
                }
                Layout::Sparse => {
                    let nz: Vec<(usize, f64)> =
                        e.counts.iter().copied().enumerate().filter(|(_, c)| *c != 0.0).collect();
                    out.extend_from_slice(&(nz.len() as u32).to_le_bytes());
                    for (i, c) in nz {
                        out.extend_from_slice(&(i as u32).to_le_bytes());
                        out.extend_from_slice(&(c as f32).to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_parts(vocabulary: Vocabulary, histogram_bytes: &[u8]) -> Result<RetrievalIndex> {
        let what = "histogram table";
        let mut r = ByteReader::new(histogram_bytes, what);
        if r.take(4)? != INDEX_MAGIC {
            return Err(Error::format(what, "bad magic"));
        }
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(Error::format(what, format!("unsupported version {version}")));
        }
        let k = r.u32()? as usize;
        if k != vocabulary.k() {
            return Err(Error::LengthMismatch(k, vocabulary.k()));
        }
        let n = r.u32()? as usize;
        let layout = match r.u8()? {
            0 => Layout::Dense,
            1 => Layout::Sparse,
            other => return Err(Error::format(what, format!("unknown layout {other}"))),
        };
        let weighting = match r.u8()? {
            0 => Weighting::Counts,
            1 => Weighting::TfIdf,
            other => return Err(Error::format(what, format!("unknown weighting {other}"))),
        };
        let repo_tag = r.string()?;
        let grid_spacing = r.u32()? as usize;
        let n_scales = r.u32()? as usize;
        let scales = (0..n_scales).map(|_| r.u32().map(|s| s as usize)).collect::<Result<Vec<_>>>()?;
        let upright = r.u8()? != 0;
        let strongest_fraction = r.f64()?;
        let config = ExtractorConfig {
            grid_spacing,
            scales,
            upright,
            strongest_fraction,
        };
        config.validate()?;
        let idf = match weighting {
            Weighting::Counts => None,
            Weighting::TfIdf => Some((0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?),
        };
        let mut entries = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let image_id = r.string()?;
            let mut counts = vec![0.0f64; k];
            match layout {
                Layout::Dense => {
                    for c in counts.iter_mut() {
                        *c = f64::from(r.f32()?);
                    }
                }
                Layout::Sparse => {
                    let nnz = r.u32()? as usize;
                    for _ in 0..nnz {
                        let i = r.u32()? as usize;
                        let c = r.f32()?;
                        *counts
                            .get_mut(i)
                            .ok_or_else(|| Error::format(what, format!("word {i} out of range")))? = f64::from(c);
                    }
                }
            }
            entries.push(BowHistogram { image_id, counts });
        }
        r.finish()?;
        Ok(RetrievalIndex {
            vocabulary,
            entries,
            repo_tag,
            config,
            weighting,
            layout,
            idf,
        })
    }

    /// Writes `vocabulary.bin` and `histograms.bin` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.vocabulary.save(dir.join(VOCABULARY_FILE))?;
        let path = dir.join(HISTOGRAMS_FILE);
        std::fs::write(&path, self.histograms_to_bytes()).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<RetrievalIndex> {
        let dir = dir.as_ref();
        let vocabulary = Vocabulary::load(dir.join(VOCABULARY_FILE))?;
        let path = dir.join(HISTOGRAMS_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        RetrievalIndex::from_parts(vocabulary, &bytes)
    }
}
