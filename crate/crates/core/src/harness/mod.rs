//! Top-K evaluation over pairs of representation spaces.
//!
//! Every space holds one raster per pair id. A cell queries one space
//! against an index of another (or the same) space, with queries optionally
//! perturbed by a seeded rigid transform and optionally center-cropped to a
//! sub-image. Ranks of the true counterpart are kept per query so every
//! success figure can be recomputed from them.

mod manifest;
mod report;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bow::kmeans::unit_f64;
use crate::bow::{build_vocabulary, VocabularyParams};
use crate::error::{Error, Result};
use crate::features::{extract_selected, select_strongest, ExtractorConfig, FeatureSet};
use crate::index::{success_from_ranks, IndexOptions, RankedList, RetrievalIndex};
use crate::ingest::{FeatureCache, SpaceSource};
use crate::raster::{apply_transform, center_crop, overlap_correlation, GrayRaster, RigidTransform};
use crate::rerank::{
    candidate_pieces, query_patch_size, rerank_with_model, splice, PatchModel, PatchScore, RerankConfig, RerankMode,
};

pub use manifest::{DatasetManifest, OpenedDataset, Split};
pub use report::{
    rank_histogram_csv, ranks_csv, report_csv, rerank_tables, results_matrix, run_snapshot, transforms_csv, write_reports,
};

/// Name of the generator behind [`make_transforms`], recorded in reports.
pub const TRANSFORM_RNG: &str = "chacha8-sha256seed-v1";
const TRANSFORM_DOMAIN: &[u8] = b"xmir-transforms-v1";

/// One uniform rigid perturbation per pair id.
///
/// Each pair gets its own ChaCha8 stream seeded by
/// `sha256("xmir-transforms-v1" | seed as u64 LE | pair id)`; the stream
/// yields the rotation, then tx, then ty. A pair's transform therefore does
/// not depend on which other pairs are requested.
pub fn make_transforms(
    pair_ids: &[String],
    seed: u64,
    max_rotation: f64,
    max_translation: f64,
) -> BTreeMap<String, RigidTransform> {
    pair_ids
        .iter()
        .map(|id| {
            let mut h = Sha256::new();
            h.update(TRANSFORM_DOMAIN);
            h.update(seed.to_le_bytes());
            h.update(id.as_bytes());
            let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
            let mut draw = |max: f64| -max + 2.0 * max * unit_f64(&mut rng);
            let rotation_deg = draw(max_rotation);
            let tx = draw(max_translation);
            let ty = draw(max_translation);
            (id.clone(), RigidTransform { rotation_deg, tx, ty })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellSpec {
    pub repo_space: String,
    pub query_space: String,
    pub transformed: bool,
    pub patch: bool,
}

impl CellSpec {
    pub fn new(repo_space: &str, query_space: &str, transformed: bool, patch: bool) -> Self {
        CellSpec {
            repo_space: repo_space.to_string(),
            query_space: query_space.to_string(),
            transformed,
            patch,
        }
    }

    pub fn within_space(&self) -> bool {
        self.repo_space == self.query_space
    }

    /// Query variant label, e.g. `transformed/patch`.
    pub fn variant(&self) -> &'static str {
        match (self.transformed, self.patch) {
            (false, false) => "untransformed/full",
            (false, true) => "untransformed/patch",
            (true, false) => "transformed/full",
            (true, true) => "transformed/patch",
        }
    }

    pub fn key(&self) -> String {
        format!("{}<{}:{}", self.repo_space, self.query_space, self.variant())
    }
}

/// Every (repo, query, transformed, patch) combination over `spaces`.
pub fn full_matrix(spaces: &[String]) -> Vec<CellSpec> {
    let mut cells = Vec::new();
    for query in spaces {
        for transformed in [false, true] {
            for patch in [false, true] {
                for repo in spaces {
                    cells.push(CellSpec::new(repo, query, transformed, patch));
                }
            }
        }
    }
    cells
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentCell {
    pub repo_space: String,
    pub query_space: String,
    pub query_transformed: bool,
    pub query_is_patch: bool,
    pub rerank: usize,
    pub k: usize,
    /// Success percentage.
    pub result: f64,
    pub queries: usize,
}

/// 1-based rank of a query's true counterpart, before and after re-ranking.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRank {
    pub query_id: String,
    pub first_stage: usize,
    pub rank: usize,
}

/// Rankings produced for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryLists {
    pub first_stage: RankedList,
    pub reranked: Vec<Option<RankedList>>,
}

/// All per-query ranks of one cell at one re-rank depth.
#[derive(Clone, Debug, PartialEq)]
pub struct CellRun {
    pub spec: CellSpec,
    /// Requested re-rank depth (0 = none).
    pub rerank: usize,
    pub repo_size: usize,
    pub ranks: Vec<QueryRank>,
}

impl CellRun {
    pub fn success(&self, k: usize) -> f64 {
        success_from_ranks(self.ranks.iter().map(|r| Some(r.rank)).collect::<Vec<_>>().iter(), k)
    }

    pub fn mean_rank(&self) -> f64 {
        self.ranks.iter().map(|r| r.rank as f64).sum::<f64>() / self.ranks.len().max(1) as f64
    }

    pub fn mean_first_stage_rank(&self) -> f64 {
        self.ranks.iter().map(|r| r.first_stage as f64).sum::<f64>() / self.ranks.len().max(1) as f64
    }

    /// Count of queries per final rank, index 0 holding rank 1.
    pub fn rank_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.repo_size];
        for r in &self.ranks {
            h[r.rank - 1] += 1;
        }
        h
    }

    pub fn key(&self) -> String {
        format!("{}:rerank={}", self.spec.key(), self.rerank)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub extractor: ExtractorConfig,
    pub vocab_size: usize,
    pub max_iters: usize,
    /// Seeds both the vocabularies and the query transforms.
    pub seed: u64,
    pub max_rotation: f64,
    pub max_translation: f64,
    pub patch_size: usize,
    pub k_list: Vec<usize>,
    pub rerank_list: Vec<usize>,
    /// Re-rank vocabulary size; `None` uses `vocab_size`.
    pub rerank_vocab_size: Option<usize>,
    pub rerank_mean_score: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            extractor: ExtractorConfig::default(),
            vocab_size: 20_000,
            max_iters: 100,
            seed: 1,
            max_rotation: 30.0,
            max_translation: 100.0,
            patch_size: 256,
            k_list: vec![1, 5, 10, 15],
            rerank_list: vec![0, 15, 30],
            rerank_vocab_size: None,
            rerank_mean_score: false,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        self.extractor.validate()?;
        if self.vocab_size == 0 {
            return Err(Error::InvalidConfig("vocabulary size must be at least 1".into()));
        }
        if self.k_list.is_empty() || self.k_list.contains(&0) {
            return Err(Error::InvalidConfig("top-K values must be at least 1".into()));
        }
        if self.patch_size == 0 {
            return Err(Error::InvalidConfig("patch size must be at least 1".into()));
        }
        if !(self.max_rotation >= 0.0 && self.max_translation >= 0.0) {
            return Err(Error::InvalidConfig("transform bounds must be non-negative".into()));
        }
        Ok(())
    }

    fn rerank_config(&self, n: usize) -> RerankConfig {
        RerankConfig {
            n,
            vocab_size: self.rerank_vocab_size.unwrap_or(self.vocab_size),
            seed: self.seed,
            max_iters: self.max_iters,
            mode: RerankMode::Patches,
            score: if self.rerank_mean_score { PatchScore::Mean } else { PatchScore::Max },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub runs: Vec<CellRun>,
    pub settings: EvalSettings,
    pub transforms: BTreeMap<String, RigidTransform>,
    pub rng: &'static str,
}

impl EvalReport {
    /// One cell per run and K value, recomputed from the stored ranks.
    pub fn cells(&self) -> Vec<ExperimentCell> {
        let mut out = Vec::new();
        for run in &self.runs {
            for &k in &self.settings.k_list {
                out.push(ExperimentCell {
                    repo_space: run.spec.repo_space.clone(),
                    query_space: run.spec.query_space.clone(),
                    query_transformed: run.spec.transformed,
                    query_is_patch: run.spec.patch,
                    rerank: run.rerank,
                    k,
                    result: run.success(k),
                    queries: run.ranks.len(),
                });
            }
        }
        out
    }

    pub fn run(&self, spec: &CellSpec, rerank: usize) -> Option<&CellRun> {
        self.runs.iter().find(|r| &r.spec == spec && r.rerank == rerank)
    }
}

/// Runs cells over a fixed set of spaces, reusing one index per repository space.
pub struct Evaluator<'a> {
    spaces: BTreeMap<String, &'a dyn SpaceSource>,
    pair_ids: Vec<String>,
    settings: EvalSettings,
    cache: &'a FeatureCache,
    transforms: BTreeMap<String, RigidTransform>,
    indexes: Mutex<BTreeMap<String, Arc<RetrievalIndex>>>,
    pieces: Mutex<HashMap<PieceKey, Arc<Vec<FeatureSet>>>>,
    models: Mutex<VecDeque<(ModelKey, Arc<PatchModel>)>>,
}

/// (space, image id, patch size).
type PieceKey = (String, String, usize);

/// (repository space, patch size, sorted candidate ids).
type ModelKey = (String, usize, Vec<String>);

/// Re-rank models kept for reuse; oldest dropped first.
const MODEL_CACHE: usize = 16;

impl<'a> Evaluator<'a> {
    /// `pair_ids` are both the repository contents and the queries; every
    /// space must hold all of them.
    pub fn new(
        spaces: &[&'a dyn SpaceSource],
        pair_ids: Vec<String>,
        settings: EvalSettings,
        cache: &'a FeatureCache,
    ) -> Result<Self> {
        settings.validate()?;
        if pair_ids.is_empty() {
            return Err(Error::EmptyRepository);
        }
        let mut map = BTreeMap::new();
        for &space in spaces {
            let have: BTreeSet<String> = space.ids().into_iter().collect();
            if let Some(missing) = pair_ids.iter().find(|id| !have.contains(*id)) {
                return Err(Error::Manifest(format!("space `{}` has no raster for pair `{missing}`", space.name())));
            }
            if map.insert(space.name().to_string(), space).is_some() {
                return Err(Error::Manifest(format!("space `{}` listed twice", space.name())));
            }
        }
        let transforms = make_transforms(&pair_ids, settings.seed, settings.max_rotation, settings.max_translation);
        Ok(Evaluator {
            spaces: map,
            pair_ids,
            settings,
            cache,
            transforms,
            indexes: Mutex::new(BTreeMap::new()),
            pieces: Mutex::new(HashMap::new()),
            models: Mutex::new(VecDeque::new()),
        })
    }

    pub fn transforms(&self) -> &BTreeMap<String, RigidTransform> {
        &self.transforms
    }

    pub fn settings(&self) -> &EvalSettings {
        &self.settings
    }

    fn space(&self, name: &str) -> Result<&'a dyn SpaceSource> {
        self.spaces
            .get(name)
            .copied()
            .ok_or_else(|| Error::Manifest(format!("unknown space `{name}`")))
    }

    /// Vocabulary and index over the untransformed rasters of `space`.
    pub fn index_for(&self, space: &str) -> Result<Arc<RetrievalIndex>> {
        if let Some(ix) = self.indexes.lock().unwrap().get(space) {
            return Ok(ix.clone());
        }
        let source = self.space(space)?;
        let cfg = &self.settings.extractor;
        let sets = self
            .pair_ids
            .par_iter()
            .map(|id| {
                let raw = self.cache.features(space, &source.load(id)?, cfg)?;
                select_strongest(&raw, cfg.strongest_fraction)
            })
            .collect::<Result<Vec<_>>>()?;
        let params = VocabularyParams {
            k: self.settings.vocab_size,
            seed: self.settings.seed,
            max_iters: self.settings.max_iters,
        };
        let vocab = build_vocabulary(&sets, &params, space)?;
        log::info!("vocabulary for `{space}`: {} words", vocab.k());
        let ix = Arc::new(RetrievalIndex::from_feature_sets(&sets, cfg, vocab, &IndexOptions::default())?);
        self.indexes.lock().unwrap().insert(space.to_string(), ix.clone());
        Ok(ix)
    }

    /// Re-rank patch features of one repository image, computed once per patch size.
    fn pieces(&self, space: &str, id: &str, patch: usize) -> Result<Arc<Vec<FeatureSet>>> {
        let key = (space.to_string(), id.to_string(), patch);
        if let Some(p) = self.pieces.lock().unwrap().get(&key) {
            return Ok(p.clone());
        }
        let raster = self.space(space)?.load(id)?;
        let sets = Arc::new(candidate_pieces(&raster, patch, &self.settings.extractor, RerankMode::Patches)?);
        self.pieces.lock().unwrap().insert(key, sets.clone());
        Ok(sets)
    }

    /// Re-rank model of one candidate set, shared by queries with the same set.
    fn model(&self, space: &str, ids: &[&str], patch: usize, cfg: &RerankConfig) -> Result<Arc<PatchModel>> {
        let mut sorted: Vec<String> = ids.iter().map(|s| s.to_string()).collect();
        sorted.sort();
        let key = (space.to_string(), patch, sorted);
        if let Some((_, m)) = self.models.lock().unwrap().iter().find(|(k, _)| *k == key) {
            return Ok(m.clone());
        }
        let m = Arc::new(PatchModel::build(ids, cfg, |rid| self.pieces(space, rid, patch))?);
        let mut models = self.models.lock().unwrap();
        if models.len() == MODEL_CACHE {
            models.pop_front();
        }
        models.push_back((key, m.clone()));
        Ok(m)
    }

    /// The query raster a cell sends for pair `id`.
    pub fn prepare_query(&self, spec: &CellSpec, id: &str) -> Result<GrayRaster> {
        let mut q = self.space(&spec.query_space)?.load(id)?;
        if spec.transformed {
            q = apply_transform(&q, &self.transforms[id]);
        }
        if spec.patch {
            q = center_crop(&q, self.settings.patch_size)?;
        }
        Ok(q.with_id(id))
    }

    /// Full first-stage ranking of pair `id` in `spec`, plus the spliced
    /// re-ranked list for every non-zero depth in `rerank_list` (`None` for 0).
    pub fn rank_query(&self, spec: &CellSpec, id: &str, rerank_list: &[usize]) -> Result<QueryLists> {
        let ix = self.index_for(&spec.repo_space)?;
        let cfg = &self.settings.extractor;
        let q = self.prepare_query(spec, id)?;
        let fs = if spec.transformed || spec.patch {
            extract_selected(&q, cfg)?
        } else {
            let raw = self.cache.features(&spec.query_space, &q, cfg)?;
            select_strongest(&raw, cfg.strongest_fraction)?
        };
        let first = ix.query_features(&fs, ix.len())?;
        let mut reranked: Vec<Option<RankedList>> = Vec::with_capacity(rerank_list.len());
        // Depths that clamp to the same size share one re-rank.
        let mut done: BTreeMap<usize, RankedList> = BTreeMap::new();
        for &n in rerank_list {
            if n == 0 {
                reranked.push(None);
                continue;
            }
            let n = n.min(ix.len());
            if let Some(list) = done.get(&n) {
                reranked.push(Some(list.clone()));
                continue;
            }
            let rr_cfg = self.settings.rerank_config(n);
            let patch = query_patch_size(&q, rr_cfg.mode);
            let head = rerank_with_model(&first, &fs, &rr_cfg, |ids| self.model(&spec.repo_space, ids, patch, &rr_cfg))?;
            let list = splice(&first, &head);
            done.insert(n, list.clone());
            reranked.push(Some(list));
        }
        Ok(QueryLists {
            first_stage: first,
            reranked,
        })
    }

    /// One run per re-rank depth in `rerank_list`, sharing the first stage.
    ///
    /// Depths beyond the repository size are clamped to it; the run keeps the
    /// requested depth as its label.
    pub fn run_cell(&self, spec: &CellSpec, rerank_list: &[usize]) -> Result<Vec<CellRun>> {
        let repo_size = self.index_for(&spec.repo_space)?.len();
        let per_query = self
            .pair_ids
            .par_iter()
            .map(|id| {
                let lists = self.rank_query(spec, id, rerank_list)?;
                let first_rank = lists.first_stage.rank_of(id).ok_or_else(|| Error::UnknownImage(id.clone()))?;
                Ok(lists
                    .reranked
                    .iter()
                    .map(|list| QueryRank {
                        query_id: id.clone(),
                        first_stage: first_rank,
                        rank: list.as_ref().map_or(first_rank, |l| l.rank_of(id).expect("splice keeps every id")),
                    })
                    .collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(rerank_list
            .iter()
            .enumerate()
            .map(|(j, &n)| CellRun {
                spec: spec.clone(),
                rerank: n,
                repo_size,
                ranks: per_query.iter().map(|q| q[j].clone()).collect(),
            })
            .collect())
    }

    /// Runs `cells`, or the full matrix over all spaces when `None`.
    ///
    /// Cells run one after another; parallelism is inside each cell.
    pub fn run_matrix(&self, cells: Option<&[CellSpec]>) -> Result<EvalReport> {
        let all;
        let cells = match cells {
            Some(c) => c,
            None => {
                all = full_matrix(&self.spaces.keys().cloned().collect::<Vec<_>>());
                &all
            }
        };
        let mut runs = Vec::new();
        for spec in cells {
            log::info!("cell {}", spec.key());
            runs.extend(self.run_cell(spec, &self.settings.rerank_list)?);
        }
        Ok(EvalReport {
            runs,
            settings: self.settings.clone(),
            transforms: self.transforms.clone(),
            rng: TRANSFORM_RNG,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Some(Summary {
            count: n,
            mean: v.iter().sum::<f64>() / n as f64,
            median,
            min: v[0],
            max: v[n - 1],
        })
    }
}

#[derive(Debug)]
pub struct EquivarianceReport {
    /// Per pair: (first raster id, coefficient or the error it hit).
    pub pairs: Vec<(String, Result<f64>)>,
    /// Over the pairs that produced a coefficient.
    pub summary: Option<Summary>,
}

impl EquivarianceReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair,correlation,error\n");
        for (id, r) in &self.pairs {
            match r {
                Ok(c) => out.push_str(&format!("{id},{c:.17},\n")),
                Err(e) => out.push_str(&format!("{id},,\"{}\"\n", e.to_string().replace('"', "'"))),
            }
        }
        if let Some(s) = &self.summary {
            out.push_str(&format!(
                "# count={} mean={:.6} median={:.6} min={:.6} max={:.6}\n",
                s.count, s.mean, s.median, s.min, s.max
            ));
        }
        out
    }
}

/// Overlap correlation of each `(a, b, t)`, where `b` is `a` seen through `t`.
pub fn equivariance_report(pairs: &[(GrayRaster, GrayRaster, RigidTransform)]) -> EquivarianceReport {
    let results: Vec<(String, Result<f64>)> = pairs
        .par_iter()
        .map(|(a, b, t)| (a.id().to_string(), overlap_correlation(a, b, t)))
        .collect();
    let ok: Vec<f64> = results.iter().filter_map(|(_, r)| r.as_ref().ok().copied()).collect();
    EquivarianceReport {
        summary: Summary::of(&ok),
        pairs: results,
    }
}
