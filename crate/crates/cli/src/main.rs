mod args;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use rayon::prelude::*;
use xmir_core::harness::{
    equivariance_report, full_matrix, results_matrix, write_reports, DatasetManifest, Evaluator,
};
use xmir_core::index::{IndexOptions, HISTOGRAMS_FILE, VOCABULARY_FILE};
use xmir_core::ingest::{apply_preprocessing, read_cache_entry, DiskSpace, FeatureCache, Preprocess, SpaceDescriptor, SpaceSource};
use xmir_core::raster::load_raster;
use xmir_core::rerank::{rerank, splice, RerankConfig, RerankMode};
use xmir_core::{
    build_vocabulary, select_strongest, Error, ExtractorConfig, FeatureSet, GrayRaster, RetrievalIndex,
    RigidTransform, Vocabulary,
};

use args::*;

const DEFAULT_CACHE: &str = ".xmir-cache";

enum Failure {
    Usage(String),
    Data(Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(e) if e.is_usage() => 1,
            Failure::Data(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => f.write_str(m),
            Failure::Data(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn io_error(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // --help and --version land here too.
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .format_target(false)
        .init();

    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run(cli))) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(f)) => {
            eprintln!("xmir: error: {f}");
            ExitCode::from(f.code())
        }
        Err(_) => {
            eprintln!("xmir: internal error");
            ExitCode::from(3)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("cannot start {n} threads: {e}")))?;
    }
    let cache = if cli.no_cache {
        FeatureCache::disabled()
    } else if let Some(dir) = &cli.cache_dir {
        FeatureCache::new(dir)
    } else {
        FeatureCache::from_env(DEFAULT_CACHE)
    };
    match cli.command {
        Command::BuildVocab(a) => build_vocab(&a, &cache),
        Command::BuildIndex(a) => build_index(&a, &cache),
        Command::Query(a) => query(&a),
        Command::Evaluate(a) => evaluate(&a, &cache),
        Command::Equivariance(a) => equivariance(&a),
        Command::Inspect(a) => inspect(&a),
    }
}

/// A space restricted to the ids that take part.
struct Space {
    source: DiskSpace,
    ids: Vec<String>,
}

impl Space {
    fn open(a: &SpaceArgs) -> Outcome<Space> {
        if let Some(dir) = &a.dir {
            let name = match &a.name {
                Some(n) => n.clone(),
                None => dir
                    .canonicalize()
                    .ok()
                    .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
                    .unwrap_or_else(|| "space".into()),
            };
            let mut sd = SpaceDescriptor::new(name, dir);
            if a.log_transform {
                sd.preprocessing.push(Preprocess::LogTransform);
            }
            let source = DiskSpace::open(sd)?;
            let ids = source.ids();
            return Ok(Space { source, ids });
        }
        let manifest = a.manifest.as_ref().expect("clap requires --dir or --manifest");
        let name = a.space.as_ref().expect("clap requires --space with --manifest");
        let ds = DatasetManifest::load(manifest)?.open()?;
        let source = ds
            .spaces
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Failure::Usage(format!("manifest has no space `{name}`")))?;
        Ok(Space {
            source,
            ids: ds.eval_pairs,
        })
    }

    fn name(&self) -> &str {
        self.source.name()
    }

    /// Strength-filtered features of every image.
    fn features(&self, cache: &FeatureCache, cfg: &ExtractorConfig) -> Outcome<Vec<FeatureSet>> {
        cfg.validate()?;
        let sets = self
            .ids
            .par_iter()
            .map(|id| {
                let raw = cache.features(self.name(), &self.source.load(id)?, cfg)?;
                select_strongest(&raw, cfg.strongest_fraction)
            })
            .collect::<Result<Vec<_>, Error>>()?;
        Ok(sets)
    }
}

fn build_vocab(a: &BuildVocabArgs, cache: &FeatureCache) -> Outcome {
    let space = Space::open(&a.space)?;
    let sets = space.features(cache, &a.extractor.config())?;
    let vocab = build_vocabulary(&sets, &a.vocab.params(), space.name())?;
    vocab.save(&a.out)?;
    log::info!("{} words over {} images of `{}`", vocab.k(), sets.len(), space.name());
    println!("{}", a.out.display());
    Ok(())
}

fn build_index(a: &BuildIndexArgs, cache: &FeatureCache) -> Outcome {
    let space = Space::open(&a.space)?;
    let cfg = a.extractor.config();
    let sets = space.features(cache, &cfg)?;
    let vocab = match &a.vocabulary {
        Some(path) => Vocabulary::load(path)?,
        None => build_vocabulary(&sets, &a.vocab.params(), space.name())?,
    };
    let opts = IndexOptions {
        repo_tag: Some(space.name().to_string()),
        allow_tag_mismatch: a.allow_tag_mismatch,
        weighting: a.weighting.into(),
        layout: a.layout.into(),
    };
    let ix = RetrievalIndex::from_feature_sets(&sets, &cfg, vocab, &opts)?;
    ix.save(&a.out)?;
    log::info!("indexed {} images of `{}` with {} words", ix.len(), space.name(), ix.vocabulary().k());
    println!("{}", a.out.display());
    Ok(())
}

fn load_image(path: &Path, log_transform: bool) -> Outcome<GrayRaster> {
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let r = load_raster(path, None)?.with_id(id);
    let steps: &[Preprocess] = if log_transform { &[Preprocess::LogTransform] } else { &[] };
    Ok(apply_preprocessing(r, steps))
}

fn emit(text: &str, out: Option<&PathBuf>) -> Outcome {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| io_error(path, e)),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| io_error(Path::new("<stdout>"), e)),
    }
}

fn query(a: &QueryArgs) -> Outcome {
    let ix = RetrievalIndex::load(&a.index)?;
    let q = load_image(&a.image, a.log_transform)?;
    let cfg = ix.config().clone();
    let mut top_n = a.top_n;
    if top_n > ix.len() {
        log::warn!("--top-n {top_n} exceeds the repository size; clamped to {}", ix.len());
        top_n = ix.len();
    }
    let first = ix.query(&q, &cfg, ix.len())?;
    if first.zero_query {
        log::warn!("query {} has no usable descriptors; all similarities are 0", q.id());
    }
    let list = if a.rerank == 0 {
        first
    } else {
        let dir = a
            .repo_dir
            .as_ref()
            .ok_or_else(|| Failure::Usage("--rerank needs --repo-dir".into()))?;
        let mut n = a.rerank;
        if n > ix.len() {
            log::warn!("--rerank {n} exceeds the repository size; clamped to {}", ix.len());
            n = ix.len();
        }
        let mut sd = SpaceDescriptor::new(ix.repo_tag(), dir);
        if a.repo_log_transform {
            sd.preprocessing.push(Preprocess::LogTransform);
        }
        let repo = DiskSpace::open(sd)?;
        let rcfg = RerankConfig {
            n,
            vocab_size: a.rerank_vocab_size,
            seed: a.seed,
            max_iters: a.max_iters,
            mode: RerankMode::Patches,
            score: a.rerank_score.into(),
        };
        let lookup = |id: &str| repo.load(id);
        let reranked = rerank(&first, &lookup, &q, &cfg, &rcfg)?;
        splice(&first, &reranked)
    };
    emit(&list.truncated(top_n).to_csv(), a.out.as_ref())
}

fn evaluate(a: &EvaluateArgs, cache: &FeatureCache) -> Outcome {
    let settings = a.settings();
    let ds = DatasetManifest::load(&a.manifest)?.open()?;
    let sources = ds.sources();
    let names = ds.space_names();
    let ev = Evaluator::new(&sources, ds.eval_pairs.clone(), settings, cache)?;
    let cells: Vec<_> = full_matrix(&names)
        .into_iter()
        .filter(|c| !a.within_only || c.within_space())
        .collect();
    log::info!("{} cells over {} pairs", cells.len(), ds.eval_pairs.len());
    let report = ev.run_matrix(Some(&cells))?;
    write_reports(&report, &a.out)?;
    log::info!(
        "feature cache: {} hits, {} extractions",
        cache.hits(),
        cache.extractions()
    );
    print!("{}", results_matrix(&report));
    Ok(())
}

fn read_transforms(path: &Path) -> Outcome<BTreeMap<String, RigidTransform>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let bad = |line: usize, m: &str| Failure::Data(Error::Format {
        what: "transform table",
        message: format!("line {line}: {m}"),
    });
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(bad(i + 1, "expected pair_id,rotation_deg,tx,ty"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1, "not a number"));
        let t = RigidTransform {
            rotation_deg: num(fields[1])?,
            tx: num(fields[2])?,
            ty: num(fields[3])?,
        };
        if out.insert(fields[0].to_string(), t).is_some() {
            return Err(bad(i + 1, "pair listed twice"));
        }
    }
    Ok(out)
}

fn equivariance(a: &EquivarianceArgs) -> Outcome {
    let sa = DiskSpace::open(SpaceDescriptor::new("a", &a.a))?;
    let sb = DiskSpace::open(SpaceDescriptor::new("b", &a.b))?;
    if sa.ids() != sb.ids() {
        return Err(Failure::Data(Error::Manifest(format!(
            "{} and {} hold different image ids",
            a.a.display(),
            a.b.display()
        ))));
    }
    let transforms = match &a.transforms {
        Some(path) => Some(read_transforms(path)?),
        None => None,
    };
    let mut pairs = Vec::new();
    for id in sa.ids() {
        let t = match &transforms {
            None => RigidTransform::identity(),
            Some(map) => *map.get(&id).ok_or_else(|| {
                Failure::Data(Error::Format {
                    what: "transform table",
                    message: format!("no transform for pair `{id}`"),
                })
            })?,
        };
        pairs.push((sa.load(&id)?, sb.load(&id)?, t));
    }
    let report = equivariance_report(&pairs);
    emit(&report.to_csv(), a.out.as_ref())
}

fn inspect(a: &InspectArgs) -> Outcome {
    let path = &a.path;
    if path.is_dir() {
        if !path.join(HISTOGRAMS_FILE).exists() || !path.join(VOCABULARY_FILE).exists() {
            return Err(Failure::Usage(format!("{} is not an index directory", path.display())));
        }
        let ix = RetrievalIndex::load(path)?;
        println!("kind: index");
        println!("images: {}", ix.len());
        println!("words: {}", ix.vocabulary().k());
        println!("repository: {}", ix.repo_tag());
        println!("vocabulary tag: {}", ix.vocabulary().source_tag());
        println!("weighting: {:?}", ix.weighting());
        println!("extractor: {}", ix.config().canonical());
        for e in ix.entries() {
            println!("entry {}: mass {} norm {:.6}", e.image_id, e.total(), e.norm());
        }
        return Ok(());
    }
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "xfc" => {
            let fs = read_cache_entry(path)?;
            let zero = fs.descriptors.iter().filter(|d| d.is_zero()).count();
            println!("kind: feature cache entry");
            println!("image: {}", fs.image_id);
            println!("descriptors: {}", fs.len());
            println!("flat descriptors: {zero}");
        }
        "toml" => {
            let m = DatasetManifest::load(path)?;
            let ds = m.open()?;
            println!("kind: manifest");
            for s in &ds.spaces {
                println!("space: {} ({})", s.name(), s.descriptor().root.display());
            }
            println!("pairs: {}", ds.pairs.len());
            println!("evaluated pairs: {}", ds.eval_pairs.len());
            for (split, n) in &ds.split_sizes {
                println!("split {split:?}: {n}");
            }
        }
        "png" | "pgm" => {
            let r = load_raster(path, None)?;
            let px = r.pixels();
            let (lo, hi) = px.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let mean = px.iter().map(|&v| f64::from(v)).sum::<f64>() / px.len() as f64;
            println!("kind: image");
            println!("size: {}x{}", r.width(), r.height());
            println!("range: {lo} .. {hi}");
            println!("mean: {mean:.6}");
        }
        _ => {
            let v = Vocabulary::load(path)?;
            println!("kind: vocabulary");
            println!("words: {}", v.k());
            println!("dim: {}", v.dim());
            println!("seed: {}", v.seed());
            println!("tag: {}", v.source_tag());
        }
    }
    Ok(())
}
