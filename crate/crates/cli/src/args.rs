use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use xmir_core::harness::EvalSettings;
use xmir_core::index::{Layout, Weighting};
use xmir_core::rerank::PatchScore;
use xmir_core::{ExtractorConfig, VocabularyParams};

/// Sub-image retrieval across image modalities with bag-of-visual-words
/// indexes.
#[derive(Debug, Parser)]
#[command(name = "xmir", version)]
pub struct Cli {
    /// Worker threads; results do not depend on it [default: all cores]
    #[arg(long, global = true, value_parser = positive)]
    pub threads: Option<usize>,

    /// Extract features without reading or writing the feature cache
    #[arg(long, global = true)]
    pub no_cache: bool,

    /// Feature cache directory [default: $XMIR_CACHE_DIR, else ./.xmir-cache]
    #[arg(long, global = true, value_name = "DIR")]
    pub cache_dir: Option<PathBuf>,

    /// More log output on stderr (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cluster the descriptors of one space into a visual vocabulary file
    BuildVocab(BuildVocabArgs),
    /// Quantize a space into a retrieval index directory
    BuildIndex(BuildIndexArgs),
    /// Rank an index against one query image, optionally re-ranking on patches
    Query(QueryArgs),
    /// Run the top-K evaluation matrix of a dataset manifest
    Evaluate(EvaluateArgs),
    /// Overlap correlation between two spaces after undoing known transforms
    Equivariance(EquivarianceArgs),
    /// Print a summary of an index, vocabulary, cache entry, manifest or image
    Inspect(InspectArgs),
}

pub fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

fn fraction(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err("must lie in (0, 1]".into())
    }
}

/// One image space: a directory, or a named space of a manifest.
#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["dir", "manifest"])))]
pub struct SpaceArgs {
    /// Directory of .png/.pgm images; file stems are the image ids
    #[arg(long, value_name = "DIR")]
    pub dir: Option<PathBuf>,

    /// Space name, used as the vocabulary tag [default: directory name]
    #[arg(long, requires = "dir")]
    pub name: Option<String>,

    /// Apply log(1 + x) to every image after loading
    #[arg(long, requires = "dir")]
    pub log_transform: bool,

    /// Dataset manifest (TOML); only its evaluation split is used
    #[arg(long, value_name = "FILE", requires = "space")]
    pub manifest: Option<PathBuf>,

    /// Space of --manifest to read
    #[arg(long, requires = "manifest")]
    pub space: Option<String>,
}

#[derive(Clone, Debug, Args)]
pub struct ExtractorArgs {
    /// Step between descriptor centers, in pixels
    #[arg(long, default_value_t = 8, value_parser = positive)]
    pub grid_spacing: usize,

    /// Descriptor support sides in pixels, comma separated and increasing
    #[arg(long, value_delimiter = ',', default_value = "32,64,96,128")]
    pub scales: Vec<usize>,

    /// Orientation-normalized descriptors instead of upright ones
    #[arg(long)]
    pub oriented: bool,

    /// Fraction of strongest descriptors kept per image
    #[arg(long, default_value_t = 0.8, value_parser = fraction)]
    pub strongest_fraction: f64,
}

impl ExtractorArgs {
    pub fn config(&self) -> ExtractorConfig {
        ExtractorConfig {
            grid_spacing: self.grid_spacing,
            scales: self.scales.clone(),
            upright: !self.oriented,
            strongest_fraction: self.strongest_fraction,
        }
    }
}

#[derive(Clone, Debug, Args)]
pub struct VocabArgs {
    /// Number of visual words (clamped to the distinct descriptors)
    #[arg(long, default_value_t = 20_000, value_parser = positive)]
    pub vocab_size: usize,

    /// Seed for k-means++ seeding and the query transforms
    #[arg(long, default_value_t = 1)]
    pub seed: u64,

    /// Lloyd iteration cap
    #[arg(long, default_value_t = 100, value_parser = positive)]
    pub max_iters: usize,
}

impl VocabArgs {
    pub fn params(&self) -> VocabularyParams {
        VocabularyParams {
            k: self.vocab_size,
            seed: self.seed,
            max_iters: self.max_iters,
        }
    }
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    #[command(flatten)]
    pub space: SpaceArgs,
    #[command(flatten)]
    pub extractor: ExtractorArgs,
    #[command(flatten)]
    pub vocab: VocabArgs,

    /// Vocabulary file to write
    #[arg(short, long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum WeightingArg {
    Counts,
    Tfidf,
}

impl From<WeightingArg> for Weighting {
    fn from(w: WeightingArg) -> Self {
        match w {
            WeightingArg::Counts => Weighting::Counts,
            WeightingArg::Tfidf => Weighting::TfIdf,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum LayoutArg {
    Dense,
    Sparse,
}

impl From<LayoutArg> for Layout {
    fn from(l: LayoutArg) -> Self {
        match l {
            LayoutArg::Dense => Layout::Dense,
            LayoutArg::Sparse => Layout::Sparse,
        }
    }
}

#[derive(Debug, Args)]
pub struct BuildIndexArgs {
    #[command(flatten)]
    pub space: SpaceArgs,
    #[command(flatten)]
    pub extractor: ExtractorArgs,
    #[command(flatten)]
    pub vocab: VocabArgs,

    /// Existing vocabulary file; built from the space when omitted
    #[arg(long, value_name = "FILE")]
    pub vocabulary: Option<PathBuf>,

    /// Accept a vocabulary built on another space
    #[arg(long)]
    pub allow_tag_mismatch: bool,

    #[arg(long, value_enum, default_value_t = WeightingArg::Counts)]
    pub weighting: WeightingArg,

    /// Histogram storage in the index file
    #[arg(long, value_enum, default_value_t = LayoutArg::Dense)]
    pub layout: LayoutArg,

    /// Index directory to write
    #[arg(short, long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScoreArg {
    /// A candidate scores as its best patch
    Max,
    /// A candidate scores as the mean over its patches
    Mean,
}

impl From<ScoreArg> for PatchScore {
    fn from(s: ScoreArg) -> Self {
        match s {
            ScoreArg::Max => PatchScore::Max,
            ScoreArg::Mean => PatchScore::Mean,
        }
    }
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// Index directory written by build-index
    #[arg(long, value_name = "DIR")]
    pub index: PathBuf,

    /// Query image (.png or .pgm)
    #[arg(long, value_name = "FILE")]
    pub image: PathBuf,

    /// Apply log(1 + x) to the query image
    #[arg(long)]
    pub log_transform: bool,

    /// Results to print; clamped to the repository size
    #[arg(long, default_value_t = 10, value_parser = positive)]
    pub top_n: usize,

    /// Re-rank this many first-stage results on query-sized patches (0: off)
    #[arg(long, default_value_t = 0)]
    pub rerank: usize,

    /// Repository images, needed by --rerank
    #[arg(long, value_name = "DIR")]
    pub repo_dir: Option<PathBuf>,

    /// Apply log(1 + x) to the repository images
    #[arg(long)]
    pub repo_log_transform: bool,

    /// Re-rank vocabulary size
    #[arg(long, default_value_t = 20_000, value_parser = positive)]
    pub rerank_vocab_size: usize,

    #[arg(long, value_enum, default_value_t = ScoreArg::Max)]
    pub rerank_score: ScoreArg,

    /// Seed of the re-rank vocabulary
    #[arg(long, default_value_t = 1)]
    pub seed: u64,

    /// Lloyd iteration cap of the re-rank vocabulary
    #[arg(long, default_value_t = 100, value_parser = positive)]
    pub max_iters: usize,

    /// Write the CSV here instead of stdout
    #[arg(short, long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Dataset manifest (TOML)
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub extractor: ExtractorArgs,
    #[command(flatten)]
    pub vocab: VocabArgs,

    /// Top-K cut-offs, comma separated
    #[arg(long = "k", value_delimiter = ',', default_value = "1,5,10,15", value_parser = positive)]
    pub k_list: Vec<usize>,

    /// Re-rank depths, comma separated (0: first stage only)
    #[arg(long = "rerank", value_delimiter = ',', default_value = "0,15,30")]
    pub rerank_list: Vec<usize>,

    /// Re-rank vocabulary size [default: --vocab-size]
    #[arg(long, value_parser = positive)]
    pub rerank_vocab_size: Option<usize>,

    #[arg(long, value_enum, default_value_t = ScoreArg::Max)]
    pub rerank_score: ScoreArg,

    /// Largest query rotation, in degrees
    #[arg(long, default_value_t = 30.0)]
    pub max_rotation: f64,

    /// Largest query translation per axis, in pixels
    #[arg(long, default_value_t = 100.0)]
    pub max_translation: f64,

    /// Side of the center crop used as patch query
    #[arg(long, default_value_t = 256, value_parser = positive)]
    pub patch_size: usize,

    /// Only the cells whose query and repository share a space
    #[arg(long)]
    pub within_only: bool,

    /// Report directory
    #[arg(short, long, value_name = "DIR", default_value = "xmir-report")]
    pub out: PathBuf,
}

impl EvaluateArgs {
    pub fn settings(&self) -> EvalSettings {
        EvalSettings {
            extractor: self.extractor.config(),
            vocab_size: self.vocab.vocab_size,
            max_iters: self.vocab.max_iters,
            seed: self.vocab.seed,
            max_rotation: self.max_rotation,
            max_translation: self.max_translation,
            patch_size: self.patch_size,
            k_list: self.k_list.clone(),
            rerank_list: self.rerank_list.clone(),
            rerank_vocab_size: self.rerank_vocab_size,
            rerank_mean_score: matches!(self.rerank_score, ScoreArg::Mean),
        }
    }
}

#[derive(Debug, Args)]
pub struct EquivarianceArgs {
    /// First view of every pair
    #[arg(long, value_name = "DIR")]
    pub a: PathBuf,

    /// Second view; same file stems as --a
    #[arg(long, value_name = "DIR")]
    pub b: PathBuf,

    /// CSV (pair_id,rotation_deg,tx,ty) of transforms taking a onto b
    /// [default: identity]
    #[arg(long, value_name = "FILE")]
    pub transforms: Option<PathBuf>,

    /// Write the CSV here instead of stdout
    #[arg(short, long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Index directory, vocabulary file, .xfc cache entry, .toml manifest or image
    pub path: PathBuf,
}
