//! Second-stage re-ranking over query-sized patches.
//!
//! The top-N candidates of a first-stage ranking are cut into the fewest
//! equidistant query-sized patches that cover each image (or kept whole for
//! full-image queries). A fresh vocabulary is clustered from those patches
//! only, and each candidate is re-scored by its best (or mean) patch cosine
//! against the query.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rayon::prelude::*;

use crate::bow::{build_vocabulary, cosine, quantize, BowHistogram, Vocabulary, VocabularyParams};
use crate::error::{Error, Result};
use crate::features::{extract_selected, ExtractorConfig, FeatureSet};
use crate::index::{sort_items, RankedItem, RankedList};
use crate::raster::GrayRaster;

/// Origins of a covering of a `covers.0 x covers.1` image by square patches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch: usize,
    pub origins: Vec<(usize, usize)>,
    pub covers: (usize, usize),
}

/// Origins along one axis: `n = ceil(len / patch)` patches, evenly spread
/// from 0 to `len - patch` and rounded to whole pixels.
pub fn axis_origins(len: usize, patch: usize) -> Result<Vec<usize>> {
    if patch == 0 || patch > len {
        return Err(Error::PatchTooLarge {
            patch,
            width: len,
            height: len,
        });
    }
    let n = len.div_ceil(patch);
    if n == 1 {
        return Ok(vec![0]);
    }
    let span = len - patch;
    let d = n - 1;
    // round(i * span / d), halves rounded up.
    Ok((0..n).map(|i| (2 * i * span + d) / (2 * d)).collect())
}

pub fn patch_grid(width: usize, height: usize, patch: usize) -> Result<PatchGrid> {
    if patch == 0 || patch > width || patch > height {
        return Err(Error::PatchTooLarge { patch, width, height });
    }
    let xs = axis_origins(width, patch)?;
    let ys = axis_origins(height, patch)?;
    let origins = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
    Ok(PatchGrid {
        patch,
        origins,
        covers: (width, height),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PatchScore {
    /// A candidate scores as its best-matching patch.
    #[default]
    Max,
    /// Average over all of a candidate's patches.
    Mean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RerankMode {
    /// Candidates are cut into query-sized patches.
    #[default]
    Patches,
    /// Each candidate is a single whole-image entry.
    FullImage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RerankConfig {
    /// How many first-stage results to re-score.
    pub n: usize,
    /// Requested vocabulary size, clamped to the distinct patch descriptors.
    pub vocab_size: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub mode: RerankMode,
    pub score: PatchScore,
}

impl Default for RerankConfig {
    fn default() -> Self {
        RerankConfig {
            n: 30,
            vocab_size: 20_000,
            seed: 1,
            max_iters: 100,
            mode: RerankMode::Patches,
            score: PatchScore::Max,
        }
    }
}

/// Source of candidate rasters by image id.
pub trait RasterLookup {
    fn raster(&self, image_id: &str) -> Result<GrayRaster>;
}

impl RasterLookup for HashMap<String, GrayRaster> {
    fn raster(&self, image_id: &str) -> Result<GrayRaster> {
        self.get(image_id).cloned().ok_or_else(|| Error::UnknownImage(image_id.to_string()))
    }
}

impl RasterLookup for BTreeMap<String, GrayRaster> {
    fn raster(&self, image_id: &str) -> Result<GrayRaster> {
        self.get(image_id).cloned().ok_or_else(|| Error::UnknownImage(image_id.to_string()))
    }
}

impl RasterLookup for [GrayRaster] {
    fn raster(&self, image_id: &str) -> Result<GrayRaster> {
        self.iter()
            .find(|r| r.id() == image_id)
            .cloned()
            .ok_or_else(|| Error::UnknownImage(image_id.to_string()))
    }
}

impl<F: Fn(&str) -> Result<GrayRaster>> RasterLookup for F {
    fn raster(&self, image_id: &str) -> Result<GrayRaster> {
        self(image_id)
    }
}

/// Feature sets of the pieces a candidate is cut into for re-scoring, in
/// grid order: query-sized patches, or the whole image.
pub fn candidate_pieces(
    raster: &GrayRaster,
    patch: usize,
    extractor: &ExtractorConfig,
    mode: RerankMode,
) -> Result<Vec<FeatureSet>> {
    let pieces: Vec<GrayRaster> = match mode {
        RerankMode::FullImage => vec![raster.clone()],
        RerankMode::Patches => {
            let grid = patch_grid(raster.width(), raster.height(), patch)?;
            grid.origins
                .iter()
                .map(|&(x, y)| raster.crop(x, y, patch, patch))
                .collect::<Result<_>>()?
        }
    };
    pieces.par_iter().map(|p| extract_selected(p, extractor)).collect()
}

/// Patch side used for `query`: its shorter side.
pub fn query_patch_size(query: &GrayRaster, mode: RerankMode) -> usize {
    let patch = query.width().min(query.height());
    if mode == RerankMode::Patches && query.width() != query.height() {
        log::warn!(
            "non-square query {} ({}x{}); using {patch} px patches",
            query.id(),
            query.width(),
            query.height()
        );
    }
    patch
}

/// Re-orders the first `cfg.n` entries of `first_stage`.
///
/// The returned list holds exactly those candidates, sorted by their new
/// score (descending) and image id. Candidates without usable descriptors
/// score 0. A non-square query in patch mode uses its shorter side as patch
/// size.
pub fn rerank<L: RasterLookup + Sync + ?Sized>(
    first_stage: &RankedList,
    repo: &L,
    query: &GrayRaster,
    extractor: &ExtractorConfig,
    cfg: &RerankConfig,
) -> Result<RankedList> {
    let patch = query_patch_size(query, cfg.mode);
    let query_features = extract_selected(query, extractor)?;
    rerank_with(first_stage, &query_features, cfg, |id| {
        candidate_pieces(&repo.raster(id)?, patch, extractor, cfg.mode).map(Arc::new)
    })
}

/// Re-rank vocabulary of one candidate set, with every patch quantized.
///
/// Built from the candidates in id order, so it depends on the set only and
/// queries with the same top-N can share it.
#[derive(Clone, Debug)]
pub struct PatchModel {
    ids: Vec<String>,
    vocab: Option<Vocabulary>,
    /// (index into `ids`, patch histogram).
    patches: Vec<(usize, BowHistogram)>,
}

impl PatchModel {
    /// `pieces` gives the feature sets of one candidate (see [`candidate_pieces`]).
    pub fn build<F>(ids: &[&str], cfg: &RerankConfig, pieces: F) -> Result<Self>
    where
        F: Fn(&str) -> Result<Arc<Vec<FeatureSet>>> + Sync,
    {
        let mut ids: Vec<String> = ids.iter().map(|s| s.to_string()).collect();
        ids.sort();
        ids.dedup();
        let per_candidate = ids.par_iter().map(|id| pieces(id)).collect::<Result<Vec<_>>>()?;
        let sets: Vec<(usize, &FeatureSet)> = per_candidate
            .iter()
            .enumerate()
            .flat_map(|(ci, sets)| sets.iter().map(move |s| (ci, s)))
            .collect();
        let params = VocabularyParams {
            k: cfg.vocab_size,
            seed: cfg.seed,
            max_iters: cfg.max_iters,
        };
        let vocab = match build_vocabulary(sets.iter().map(|(_, s)| *s), &params, "rerank") {
            Ok(v) => Some(v),
            // No candidate produced a usable descriptor.
            Err(Error::NoDescriptors) => None,
            Err(e) => return Err(e),
        };
        let patches = match &vocab {
            Some(v) => sets
                .par_iter()
                .map(|(ci, s)| Ok((*ci, quantize(s, v)?)))
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        Ok(PatchModel { ids, vocab, patches })
    }

    /// Candidate ids, sorted.
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Score of every candidate in [`ids`](Self::ids) order; all 0 without a vocabulary.
    pub fn scores(&self, query_features: &FeatureSet, score: PatchScore) -> Result<Vec<f64>> {
        let mut scores = vec![0.0f64; self.ids.len()];
        let Some(vocab) = &self.vocab else {
            return Ok(scores);
        };
        let qh = quantize(query_features, vocab)?;
        let mut counts = vec![0usize; self.ids.len()];
        for (ci, h) in &self.patches {
            let sim = cosine(&qh, h)?;
            counts[*ci] += 1;
            scores[*ci] = match score {
                PatchScore::Max => scores[*ci].max(sim),
                PatchScore::Mean => scores[*ci] + sim,
            };
        }
        if score == PatchScore::Mean {
            for (s, c) in scores.iter_mut().zip(counts) {
                if c > 0 {
                    *s /= c as f64;
                }
            }
        }
        Ok(scores)
    }
}

fn check_depth(first_stage: &RankedList, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("re-rank depth must be at least 1".into()));
    }
    if n > first_stage.len() {
        return Err(Error::InvalidArgument(format!(
            "re-rank depth {n} exceeds the {} first-stage results",
            first_stage.len()
        )));
    }
    Ok(())
}

/// [`rerank`] with precomputed query features and a source of candidate
/// piece features (see [`candidate_pieces`]), so callers can reuse them
/// across queries.
pub fn rerank_with<F>(
    first_stage: &RankedList,
    query_features: &FeatureSet,
    cfg: &RerankConfig,
    pieces: F,
) -> Result<RankedList>
where
    F: Fn(&str) -> Result<Arc<Vec<FeatureSet>>> + Sync,
{
    rerank_with_model(first_stage, query_features, cfg, |ids| {
        PatchModel::build(ids, cfg, &pieces).map(Arc::new)
    })
}

/// [`rerank_with`] where `model` supplies the [`PatchModel`] of the top-N ids,
/// so a caller can memoize it by candidate set.
pub fn rerank_with_model<M>(
    first_stage: &RankedList,
    query_features: &FeatureSet,
    cfg: &RerankConfig,
    model: M,
) -> Result<RankedList>
where
    M: FnOnce(&[&str]) -> Result<Arc<PatchModel>>,
{
    check_depth(first_stage, cfg.n)?;
    let candidates: Vec<&str> = first_stage.items[..cfg.n].iter().map(|i| i.image_id.as_str()).collect();
    let model = model(&candidates)?;
    let scores = model.scores(query_features, cfg.score)?;
    let mut items = candidates
        .iter()
        .map(|id| {
            let at = model
                .ids
                .binary_search_by(|m| m.as_str().cmp(id))
                .map_err(|_| Error::UnknownImage(id.to_string()))?;
            Ok(RankedItem {
                image_id: id.to_string(),
                similarity: scores[at],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    sort_items(&mut items);
    Ok(RankedList {
        query_id: first_stage.query_id.clone(),
        items,
        zero_query: first_stage.zero_query,
    })
}

/// Replaces the head of `first_stage` by its re-ranked order, keeping the tail.
pub fn splice(first_stage: &RankedList, reranked: &RankedList) -> RankedList {
    let mut items = reranked.items.clone();
    items.extend(first_stage.items.iter().skip(reranked.len()).cloned());
    RankedList {
        query_id: first_stage.query_id.clone(),
        items,
        zero_query: first_stage.zero_query,
    }
}
