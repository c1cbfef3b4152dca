//! Lloyd's k-means with k-means++ seeding.
//!
//! Results depend only on `(points, k, seed, max_iters)`: assignment runs in
//! parallel but every reduction happens sequentially in point order, and the
//! seeding draws from a ChaCha8 stream through fixed arithmetic rather than
//! library samplers.

use std::collections::HashSet;
use std::hash::{Hash, Hasher};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Scalar type of clustered points.
pub trait Element: Copy + Send + Sync + PartialEq + std::fmt::Debug + 'static {
    /// Relative slack allowed when checking that inertia never increases.
    const INERTIA_SLACK: f64;

    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
    /// Squared Euclidean distance; may stop early and return any value
    /// `>= bound` once the partial sum reaches `bound`.
    fn sq_dist_bounded(a: &[Self], b: &[Self], bound: f64) -> f64;
}

macro_rules! lane_distance {
    ($t:ty, $lanes:expr) => {
        fn sq_dist_bounded(a: &[$t], b: &[$t], bound: f64) -> f64 {
            const L: usize = $lanes;
            // Lane l accumulates elements l, l + L, l + 2L, ...; the bound is
            // checked after every block of 4L elements.
            let mut acc = [0.0 as $t; L];
            let blocked = a.len() / (4 * L) * (4 * L);
            for (xa, ya) in a[..blocked].chunks_exact(4 * L).zip(b[..blocked].chunks_exact(4 * L)) {
                for (x, y) in xa.chunks_exact(L).zip(ya.chunks_exact(L)) {
                    for l in 0..L {
                        let d = x[l] - y[l];
                        acc[l] += d * d;
                    }
                }
                // Partial sums only grow, so the bound test is exact.
                let partial = acc.iter().sum::<$t>() as f64;
                if partial >= bound {
                    return partial;
                }
            }
            let full = a.len() / L * L;
            for (x, y) in a[blocked..full].chunks_exact(L).zip(b[blocked..full].chunks_exact(L)) {
                for l in 0..L {
                    let d = x[l] - y[l];
                    acc[l] += d * d;
                }
            }
            let mut tail = 0.0 as $t;
            for j in full..a.len() {
                let d = a[j] - b[j];
                tail += d * d;
            }
            (acc.iter().sum::<$t>() + tail) as f64
        }
    };
}

impl Element for f32 {
    const INERTIA_SLACK: f64 = 1e-5;

    fn to_f64(self) -> f64 {
        f64::from(self)
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    lane_distance!(f32, 8);
}

impl Element for f64 {
    const INERTIA_SLACK: f64 = 1e-12;

    fn to_f64(self) -> f64 {
        self
    }

    fn from_f64(v: f64) -> Self {
        v
    }

    lane_distance!(f64, 4);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        KMeansParams {
            k: 8,
            seed: 1,
            max_iters: 100,
        }
    }
}

#[derive(Clone, Debug)]
pub struct KMeansOutcome<T> {
    /// Row-major `k x dim`.
    pub centroids: Vec<T>,
    pub k: usize,
    pub dim: usize,
    pub assignments: Vec<u32>,
    /// Inertia after the initial assignment and after every Lloyd step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Number of empty clusters reseeded over the run.
    pub repairs: usize,
}

impl<T: Element> KMeansOutcome<T> {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().expect("history is never empty")
    }

    pub fn centroid(&self, i: usize) -> &[T] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }
}

struct RowKey<'a, T>(&'a [T]);

impl<T: Element> PartialEq for RowKey<'_, T> {
    fn eq(&self, other: &Self) -> bool {
        self.0.iter().zip(other.0).all(|(a, b)| a.to_f64() == b.to_f64())
    }
}

impl<T: Element> Eq for RowKey<'_, T> {}

impl<T: Element> Hash for RowKey<'_, T> {
    fn hash<H: Hasher>(&self, state: &mut H) {
        for v in self.0 {
            // +0.0 folds -0.0 onto 0.0.
            (v.to_f64() + 0.0).to_bits().hash(state);
        }
    }
}

/// Number of distinct rows, counting no further than `cap`.
pub fn distinct_rows<T: Element>(points: &[T], dim: usize, cap: usize) -> usize {
    let mut seen = HashSet::new();
    for row in points.chunks_exact(dim) {
        seen.insert(RowKey(row));
        if seen.len() >= cap {
            break;
        }
    }
    seen.len()
}

/// Uniform double in `[0, 1)` from the top 53 bits of the stream.
pub(crate) fn unit_f64(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn nearest<T: Element>(row: &[T], centroids: &[T], dim: usize) -> (u32, f64) {
    let mut best = (0u32, f64::INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = T::sq_dist_bounded(row, centroid, best.1);
        if d < best.1 {
            best = (c as u32, d);
        }
    }
    best
}

fn assign<T: Element>(points: &[T], dim: usize, centroids: &[T]) -> (Vec<u32>, Vec<f64>) {
    points
        .par_chunks_exact(dim)
        .with_min_len(64)
        .map(|row| nearest(row, centroids, dim))
        .unzip()
}

/// Same result as [`nearest`], but starts from the distance to `hint` so
/// that most other centroids are abandoned after a few lanes.
fn nearest_from<T: Element>(row: &[T], centroids: &[T], dim: usize, hint: usize) -> (u32, f64) {
    let mut best = (hint as u32, T::sq_dist_bounded(row, &centroids[hint * dim..(hint + 1) * dim], f64::INFINITY));
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        if c == hint {
            continue;
        }
        // Abandon only when strictly worse, so exact ties are still seen.
        let bound = best.1 * (1.0 + 1e-12) + f64::MIN_POSITIVE;
        let d = T::sq_dist_bounded(row, centroid, bound);
        if d < best.1 || (d == best.1 && (c as u32) < best.0) {
            best = (c as u32, d);
        }
    }
    best
}

fn reassign<T: Element>(points: &[T], dim: usize, centroids: &[T], previous: &[u32]) -> (Vec<u32>, Vec<f64>) {
    points
        .par_chunks_exact(dim)
        .zip(previous.par_iter())
        .with_min_len(64)
        .map(|(row, &hint)| nearest_from(row, centroids, dim, hint as usize))
        .unzip()
}

/// Nearest centroid by squared Euclidean distance, lowest index on ties.
pub fn nearest_centroid<T: Element>(row: &[T], centroids: &[T], dim: usize) -> usize {
    nearest(row, centroids, dim).0 as usize
}

fn seed_plus_plus<T: Element>(points: &[T], dim: usize, k: usize, seed: u64) -> Vec<T> {
    let n = points.len() / dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = ((rng.next_u64() as u128 * n as u128) >> 64) as usize;
    let mut centroids: Vec<T> = points[first * dim..(first + 1) * dim].to_vec();
    let mut min_d: Vec<f64> = points
        .par_chunks_exact(dim)
        .map(|row| T::sq_dist_bounded(row, &centroids[..dim], f64::INFINITY))
        .collect();
    while centroids.len() / dim < k {
        let total: f64 = min_d.iter().sum();
        if total <= 0.0 {
            break;
        }
        let target = unit_f64(&mut rng) * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, d) in min_d.iter().enumerate() {
            if *d <= 0.0 {
                continue;
            }
            acc += d;
            pick = Some(i);
            if acc > target {
                break;
            }
        }
        let pick = pick.expect("positive total implies a candidate");
        let row = &points[pick * dim..(pick + 1) * dim];
        centroids.extend_from_slice(row);
        min_d
            .par_iter_mut()
            .zip(points.par_chunks_exact(dim))
            .for_each(|(m, p)| {
                let d = T::sq_dist_bounded(p, row, *m);
                if d < *m {
                    *m = d;
                }
            });
    }
    centroids
}

/// Clusters the `points.len() / dim` rows of `points`.
///
/// `k` is clamped to the number of distinct rows. Iteration stops at an
/// assignment fixpoint or after `max_iters` Lloyd steps. A cluster left empty
/// after an update is reseeded at the point farthest from its own centroid.
pub fn kmeans<T: Element>(points: &[T], dim: usize, params: &KMeansParams) -> Result<KMeansOutcome<T>> {
    if params.k < 1 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if dim == 0 || points.is_empty() || !points.len().is_multiple_of(dim) {
        return Err(Error::NoDescriptors);
    }
    let n = points.len() / dim;
    let k = distinct_rows(points, dim, params.k);
    let mut centroids = seed_plus_plus(points, dim, k, params.seed);
    debug_assert_eq!(centroids.len(), k * dim);

    let (mut assignments, mut dists) = assign(points, dim, &centroids);
    let mut history = vec![dists.iter().sum::<f64>()];
    let mut iterations = 0;
    let mut converged = false;
    let mut repairs = 0;
    while iterations < params.max_iters {
        iterations += 1;
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (row, &a) in points.chunks_exact(dim).zip(&assignments) {
            let a = a as usize;
            counts[a] += 1;
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(row) {
                *s += v.to_f64();
            }
        }
        let empty: Vec<usize> = (0..k).filter(|c| counts[*c] == 0).collect();
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *dst = T::from_f64(s * inv);
                }
            }
        }
        if !empty.is_empty() {
            let mut far: Vec<usize> = (0..n).collect();
            far.sort_by(|&a, &b| dists[b].total_cmp(&dists[a]).then(a.cmp(&b)));
            for (c, p) in empty.iter().zip(far) {
                centroids[c * dim..(c + 1) * dim].copy_from_slice(&points[p * dim..(p + 1) * dim]);
            }
            repairs += empty.len();
        }
        let (next, next_dists) = reassign(points, dim, &centroids, &assignments);
        let inertia: f64 = next_dists.iter().sum();
        let prev = *history.last().unwrap();
        if inertia > prev * (1.0 + T::INERTIA_SLACK) + 1e-12 {
            debug_assert!(false, "k-means inertia increased from {prev} to {inertia}");
            log::warn!("k-means inertia increased from {prev} to {inertia}");
        }
        history.push(inertia);
        let fixpoint = empty.is_empty() && next == assignments;
        assignments = next;
        dists = next_dists;
        if fixpoint {
            converged = true;
            break;
        }
    }
    Ok(KMeansOutcome {
        centroids,
        k,
        dim,
        assignments,
        inertia_history: history,
        iterations,
        converged,
        repairs,
    })
}
