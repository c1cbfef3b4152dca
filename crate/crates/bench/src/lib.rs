//! Fixtures shared by the benchmarks.

use xmir_core::{extract_grid, select_strongest, synth, ExtractorConfig, FeatureSet, GrayRaster};

pub fn textures(n: usize, size: usize) -> Vec<GrayRaster> {
    (0..n).map(|i| synth::textured(i as u64, size, size)).collect()
}

/// Strength-filtered features of `rasters` under `cfg`.
pub fn features(rasters: &[GrayRaster], cfg: &ExtractorConfig) -> Vec<FeatureSet> {
    rasters
        .iter()
        .map(|r| select_strongest(&extract_grid(r, cfg).unwrap(), cfg.strongest_fraction).unwrap())
        .collect()
}
