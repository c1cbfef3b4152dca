use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::{CellSpec, EvalReport};
use crate::error::{Error, Result};
use crate::raster::RigidTransform;

/// One row per cell, re-rank depth and K.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("cell,repo_space,query_space,transformed,patch,rerank,k,success,queries\n");
    for c in report.cells() {
        let spec = CellSpec::new(&c.repo_space, &c.query_space, c.query_transformed, c.query_is_patch);
        writeln!(
            out,
            "{},{},{},{},{},{},{},{:.6},{}",
            spec.key(),
            c.repo_space,
            c.query_space,
            c.query_transformed,
            c.query_is_patch,
            c.rerank,
            c.k,
            c.result,
            c.queries
        )
        .unwrap();
    }
    out
}

pub fn ranks_csv(report: &EvalReport) -> String {
    let mut out = String::from("cell,rerank,query_id,first_stage_rank,rank\n");
    for run in &report.runs {
        for r in &run.ranks {
            writeln!(out, "{},{},{},{},{}", run.spec.key(), run.rerank, r.query_id, r.first_stage, r.rank).unwrap();
        }
    }
    out
}

/// Number of queries whose match landed at each rank, for every run.
pub fn rank_histogram_csv(report: &EvalReport) -> String {
    let mut out = String::from("cell,rerank,rank,count\n");
    for run in &report.runs {
        for (i, count) in run.rank_histogram().iter().enumerate() {
            writeln!(out, "{},{},{},{}", run.spec.key(), run.rerank, i + 1, count).unwrap();
        }
    }
    out
}

pub fn transforms_csv(transforms: &BTreeMap<String, RigidTransform>) -> String {
    let mut out = String::from("pair_id,rotation_deg,tx,ty\n");
    for (id, t) in transforms {
        writeln!(out, "{id},{:?},{:?},{:?}", t.rotation_deg, t.tx, t.ty).unwrap();
    }
    out
}

fn spaces_in_order(report: &EvalReport) -> Vec<String> {
    let mut seen = Vec::new();
    for run in &report.runs {
        for s in [&run.spec.query_space, &run.spec.repo_space] {
            if !seen.contains(s) {
                seen.push(s.clone());
            }
        }
    }
    seen
}

/// Query-by-repository success tables, one per re-rank depth and K.
///
/// Rows are query space and variant, columns the repository space. Values
/// carry `[w]` for within-space cells and `[x]` for cross-space cells.
pub fn results_matrix(report: &EvalReport) -> String {
    let spaces = spaces_in_order(report);
    let variants = [(false, false), (false, true), (true, false), (true, true)];
    let mut out = String::new();
    let mut depths: Vec<usize> = report.runs.iter().map(|r| r.rerank).collect();
    depths.sort_unstable();
    depths.dedup();
    for &depth in &depths {
        for &k in &report.settings.k_list {
            writeln!(out, "top-{k} success (%), re-rank {depth}").unwrap();
            write!(out, "{:<32}", "query \\ repository").unwrap();
            for s in &spaces {
                write!(out, " | {s:>12}").unwrap();
            }
            out.push('\n');
            for q in &spaces {
                for &(transformed, patch) in &variants {
                    let probe = CellSpec::new(q, q, transformed, patch);
                    let row: Vec<String> = spaces
                        .iter()
                        .map(|repo| {
                            let spec = CellSpec::new(repo, q, transformed, patch);
                            match report.run(&spec, depth) {
                                Some(run) => {
                                    let mark = if spec.within_space() { "w" } else { "x" };
                                    format!("{:.1} [{mark}]", run.success(k))
                                }
                                None => "-".to_string(),
                            }
                        })
                        .collect();
                    if row.iter().all(|c| c == "-") {
                        continue;
                    }
                    write!(out, "{:<32}", format!("{q} {}", probe.variant())).unwrap();
                    for c in row {
                        write!(out, " | {c:>12}").unwrap();
                    }
                    out.push('\n');
                }
            }
            out.push('\n');
        }
    }
    out
}

/// Success per re-rank depth (rows) and K (columns) for every patch cell.
pub fn rerank_tables(report: &EvalReport) -> String {
    let mut specs: Vec<&CellSpec> = report.runs.iter().filter(|r| r.spec.patch).map(|r| &r.spec).collect();
    specs.dedup();
    let mut out = String::new();
    for spec in specs {
        writeln!(out, "repository {}, query {} {}", spec.repo_space, spec.query_space, spec.variant()).unwrap();
        write!(out, "{:<12}", "re-rank").unwrap();
        for k in &report.settings.k_list {
            write!(out, " | {:>7}", format!("top-{k}")).unwrap();
        }
        writeln!(out, " | {:>9}", "mean rank").unwrap();
        for run in report.runs.iter().filter(|r| &r.spec == spec) {
            let label = if run.rerank == 0 { "none".to_string() } else { run.rerank.to_string() };
            write!(out, "{label:<12}").unwrap();
            for &k in &report.settings.k_list {
                write!(out, " | {:>7.1}", run.success(k)).unwrap();
            }
            writeln!(out, " | {:>9.2}", run.mean_rank()).unwrap();
        }
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct RunSnapshot<'a> {
    rng: &'a str,
    seed: u64,
    vocab_size: usize,
    max_iters: usize,
    max_rotation: f64,
    max_translation: f64,
    patch_size: usize,
    k_list: &'a [usize],
    rerank_list: &'a [usize],
    rerank_vocab_size: Option<usize>,
    rerank_mean_score: bool,
    grid_spacing: usize,
    scales: &'a [usize],
    upright: bool,
    strongest_fraction: f64,
    descriptor: &'a str,
}

pub fn run_snapshot(report: &EvalReport) -> String {
    let s = &report.settings;
    let snap = RunSnapshot {
        rng: report.rng,
        seed: s.seed,
        vocab_size: s.vocab_size,
        max_iters: s.max_iters,
        max_rotation: s.max_rotation,
        max_translation: s.max_translation,
        patch_size: s.patch_size,
        k_list: &s.k_list,
        rerank_list: &s.rerank_list,
        rerank_vocab_size: s.rerank_vocab_size,
        rerank_mean_score: s.rerank_mean_score,
        grid_spacing: s.extractor.grid_spacing,
        scales: &s.extractor.scales,
        upright: s.extractor.upright,
        strongest_fraction: s.extractor.strongest_fraction,
        descriptor: crate::features::DESCRIPTOR_VERSION,
    };
    toml::to_string(&snap).expect("snapshot holds only plain values")
}

/// Writes every report file into `dir`, creating it if needed.
pub fn write_reports(report: &EvalReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        ("report.csv", report_csv(report)),
        ("ranks.csv", ranks_csv(report)),
        ("rank_histogram.csv", rank_histogram_csv(report)),
        ("transforms.csv", transforms_csv(&report.transforms)),
        ("matrix.txt", results_matrix(report)),
        ("rerank.txt", rerank_tables(report)),
        ("run.toml", run_snapshot(report)),
    ];
    for (name, text) in files {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
