use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use xmir_core::bow::kmeans::{distinct_rows, kmeans, KMeansParams};
use xmir_core::features::{extract_selected, DESCRIPTOR_LEN};
use xmir_core::harness::make_transforms;
use xmir_core::index::IndexOptions;
use xmir_core::raster::{apply_transform, center_crop};
use xmir_core::rerank::{patch_grid, rerank, splice, RerankConfig};
use xmir_core::*;

fn small_cfg(spacing: usize) -> ExtractorConfig {
    ExtractorConfig {
        grid_spacing: spacing,
        scales: vec![16, 24],
        ..ExtractorConfig::default()
    }
}

fn raster_strategy() -> impl Strategy<Value = GrayRaster> {
    (1usize..24, 1usize..24).prop_flat_map(|(w, h)| {
        prop::collection::vec(0.0f32..=1.0, w * h).prop_map(move |px| GrayRaster::new("r", w, h, px).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn raster_shape_and_range_survive_warps(
        seed in 0u64..500,
        size in 24usize..64,
        rot in -180.0f64..180.0,
        tx in -40.0f64..40.0,
        ty in -40.0f64..40.0,
    ) {
        let r = synth::textured(seed, size, size);
        let w = apply_transform(&r, &RigidTransform { rotation_deg: rot, tx, ty });
        for img in [&r, &w] {
            prop_assert_eq!(img.pixels().len(), img.width() * img.height());
            prop_assert!(img.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let c = center_crop(&w, size / 2).unwrap();
        prop_assert_eq!(c.pixels().len(), (size / 2) * (size / 2));
    }

    #[test]
    fn out_of_range_pixels_are_rejected(bad in prop_oneof![1.0001f32..10.0, -10.0f32..-0.0001]) {
        prop_assert!(GrayRaster::new("x", 2, 1, vec![0.5, bad]).is_err());
        prop_assert!(GrayRaster::new("x", 2, 2, vec![0.5; 3]).is_err());
    }

    #[test]
    fn benchmark_transforms_stay_in_range(seed in any::<u64>(), n in 1usize..40) {
        let ids: Vec<String> = (0..n).map(|i| format!("id{i}")).collect();
        let t = make_transforms(&ids, seed, 30.0, 100.0);
        prop_assert_eq!(t.len(), n);
        for tr in t.values() {
            prop_assert!(tr.rotation_deg.abs() <= 30.0);
            prop_assert!(tr.tx.abs() <= 100.0 && tr.ty.abs() <= 100.0);
        }
        // A pair's draw does not depend on its neighbours.
        let alone = make_transforms(&ids[..1], seed, 30.0, 100.0);
        prop_assert_eq!(&alone[&ids[0]], &t[&ids[0]]);
    }

    #[test]
    fn integral_image_sums(r in raster_strategy(), a in any::<(u8, u8, u8, u8)>()) {
        let ii = IntegralImage::new(&r);
        let (w, h) = (r.width(), r.height());
        for y in 0..h {
            for x in 0..w {
                if x > 0 { prop_assert!(ii.at(x, y) >= ii.at(x - 1, y)); }
                if y > 0 { prop_assert!(ii.at(x, y) >= ii.at(x, y - 1)); }
            }
        }
        let (x0, x1) = { let (p, q) = (a.0 as usize % w, a.1 as usize % w); (p.min(q), p.max(q)) };
        let (y0, y1) = { let (p, q) = (a.2 as usize % h, a.3 as usize % h); (p.min(q), p.max(q)) };
        let direct: f64 = (y0..=y1).flat_map(|y| (x0..=x1).map(move |x| (x, y))).map(|(x, y)| f64::from(r.get(x, y))).sum();
        prop_assert!((ii.rect_sum(x0, y0, x1, y1) - direct).abs() < 1e-9 * (1.0 + direct));
    }

    #[test]
    fn config_validation(spacing in 0usize..4, scales in prop::collection::vec(0usize..80, 0..5)) {
        let cfg = ExtractorConfig { grid_spacing: spacing, scales: scales.clone(), ..ExtractorConfig::default() };
        let valid = spacing >= 1
            && !scales.is_empty()
            && scales.iter().all(|s| *s >= 8 && s % 4 == 0)
            && scales.windows(2).all(|w| w[0] < w[1]);
        prop_assert_eq!(cfg.validate().is_ok(), valid);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn descriptors_are_unit_or_zero_and_row_major(seed in 0u64..1000, spacing in 3usize..12, oriented in any::<bool>()) {
        let r = synth::textured(seed, 56, 48);
        let cfg = ExtractorConfig { upright: !oriented, ..small_cfg(spacing) };
        let fs = extract_grid(&r, &cfg).unwrap();
        prop_assert!(!fs.is_empty());
        for d in &fs.descriptors {
            prop_assert_eq!(d.vector.len(), DESCRIPTOR_LEN);
            prop_assert!(d.strength >= 0.0);
            let norm: f64 = d.vector.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
            prop_assert!(d.is_zero() || (norm - 1.0).abs() < 1e-5, "norm {}", norm);
        }
        let keys: Vec<(f32, f32, f32)> = fs.descriptors.iter().map(|d| (d.y, d.x, d.scale)).collect();
        prop_assert!(keys.windows(2).all(|w| w[0] < w[1]));
        let flat = GrayRaster::constant("c", 56, 48, 0.3).unwrap();
        prop_assert!(extract_grid(&flat, &cfg).unwrap().descriptors.iter().all(|d| d.is_zero() && d.strength == 0.0));
    }

    #[test]
    fn strongest_selection_keeps_order_and_count(seed in 0u64..1000, fraction in 0.01f64..=1.0) {
        let fs = extract_grid(&synth::textured(seed, 48, 48), &small_cfg(6)).unwrap();
        let kept = select_strongest(&fs, fraction).unwrap();
        prop_assert_eq!(kept.len(), (fraction * fs.len() as f64).ceil() as usize);
        let min_kept = kept.descriptors.iter().map(|d| d.strength).fold(f32::INFINITY, f32::min);
        let dropped = fs.descriptors.iter().filter(|d| !kept.descriptors.contains(d));
        for d in dropped {
            prop_assert!(d.strength <= min_kept);
        }
        // A subsequence of the original order.
        let mut it = fs.descriptors.iter();
        prop_assert!(kept.descriptors.iter().all(|k| it.any(|d| d == k)));
    }

    #[test]
    fn kmeans_centroids_distinct_and_inertia_monotone(
        n in 1usize..80,
        dim in 1usize..6,
        k in 1usize..12,
        levels in 1u32..5,
        seed in any::<u64>(),
    ) {
        // Coarse values so duplicate rows are common.
        let pts: Vec<f64> = (0..n * dim)
            .map(|i| ((seed.wrapping_mul(6364136223846793005).wrapping_add((i as u64).wrapping_mul(1442695040888963407)) >> 33) % levels as u64) as f64)
            .collect();
        let out = kmeans(&pts, dim, &KMeansParams { k, seed, max_iters: 50 }).unwrap();
        prop_assert!(out.k >= 1);
        prop_assert_eq!(out.k, k.min(distinct_rows(&pts, dim, k)));
        prop_assert_eq!(out.centroids.len(), out.k * dim);
        let rows: BTreeSet<Vec<u64>> = (0..out.k).map(|c| out.centroid(c).iter().map(|v| v.to_bits()).collect()).collect();
        prop_assert_eq!(rows.len(), out.k);
        prop_assert!(out.inertia_history.windows(2).all(|w| w[1] <= w[0] + 1e-9 * (1.0 + w[0].abs())));
        prop_assert_eq!(out.assignments.len(), n);
    }

    #[test]
    fn index_and_ranking_invariants(seed in 0u64..500, n in 2usize..7, k in 1usize..40) {
        let cfg = small_cfg(8);
        let sets: Vec<FeatureSet> = (0..n)
            .map(|i| extract_selected(&synth::textured(seed + i as u64, 48, 48).with_id(format!("i{i}")), &cfg).unwrap())
            .collect();
        let vocab = build_vocabulary(&sets, &VocabularyParams { k, seed, max_iters: 10 }, "s").unwrap();
        let ix = RetrievalIndex::from_feature_sets(&sets, &cfg, vocab, &IndexOptions::default()).unwrap();
        let ids: BTreeSet<&str> = ix.entries().iter().map(|e| e.image_id.as_str()).collect();
        prop_assert_eq!(ids.len(), n);
        for (e, s) in ix.entries().iter().zip(&sets) {
            prop_assert_eq!(e.len(), ix.vocabulary().k());
            prop_assert_eq!(e.total(), s.descriptors.iter().filter(|d| !d.is_zero()).count() as f64);
        }
        let q = ix.query_features(&sets[0], n).unwrap();
        prop_assert_eq!(q.len(), n);
        for w in q.items.windows(2) {
            prop_assert!(w[0].similarity > w[1].similarity
                || (w[0].similarity == w[1].similarity && w[0].image_id < w[1].image_id));
        }
        prop_assert!((q.items[0].similarity - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rerank_permutes_head_and_splice_keeps_tail(seed in 0u64..300, n in 1usize..5) {
        let repo: Vec<GrayRaster> = (0..5).map(|i| synth::textured(seed + i, 64, 64).with_id(format!("r{i}"))).collect();
        let scores: Vec<RankedItem> = (0..5)
            .map(|i| RankedItem { image_id: format!("r{i}"), similarity: ((seed + i * 7) % 5) as f64 / 5.0 })
            .collect();
        let first = RankedList::from_scores("q", scores);
        let q = repo[(seed % 5) as usize].crop(8, 8, 40, 40).unwrap();
        let cfg = RerankConfig { n, vocab_size: 16, max_iters: 8, seed, ..RerankConfig::default() };
        let head = rerank(&first, &repo[..], &q, &small_cfg(8), &cfg).unwrap();
        let before: BTreeSet<&str> = first.ids()[..n].iter().copied().collect();
        let after: BTreeSet<&str> = head.ids().into_iter().collect();
        prop_assert_eq!(head.len(), n);
        prop_assert_eq!(before, after);
        let full = splice(&first, &head);
        prop_assert_eq!(&full.ids()[n..], &first.ids()[n..]);
        prop_assert_eq!(rerank(&first, &repo[..], &q, &small_cfg(8), &cfg).unwrap(), head);
    }
}

proptest! {
    #[test]
    fn patch_grid_covers_minimally(w in 1usize..300, h in 1usize..300, p in 1usize..300) {
        prop_assume!(p <= w && p <= h);
        let g = patch_grid(w, h, p).unwrap();
        let xs: BTreeSet<usize> = g.origins.iter().map(|o| o.0).collect();
        let ys: BTreeSet<usize> = g.origins.iter().map(|o| o.1).collect();
        prop_assert_eq!(g.origins.len(), xs.len() * ys.len());
        for (axis, len) in [(xs, w), (ys, h)] {
            let axis: Vec<usize> = axis.into_iter().collect();
            prop_assert_eq!(axis.len(), len.div_ceil(p));
            prop_assert_eq!(axis[0], 0);
            prop_assert_eq!(*axis.last().unwrap(), len - p);
            // Consecutive windows leave no gap.
            prop_assert!(axis.windows(2).all(|o| o[1] <= o[0] + p));
            if axis.len() > 1 {
                let ideal = (len - p) as f64 / (axis.len() - 1) as f64;
                prop_assert!(axis.windows(2).all(|o| ((o[1] - o[0]) as f64 - ideal).abs() <= 1.0));
            }
        }
    }

    #[test]
    fn topk_success_bounded_and_monotone(ranks in prop::collection::vec(0usize..8, 1..30)) {
        let ids: Vec<String> = (0..8).map(|i| format!("i{i}")).collect();
        let mut truth = BTreeMap::new();
        let lists: Vec<RankedList> = ranks
            .iter()
            .enumerate()
            .map(|(qi, &pos)| {
                let q = format!("q{qi}");
                truth.insert(q.clone(), ids[pos].clone());
                let items = ids.iter().enumerate().map(|(i, id)| RankedItem { image_id: id.clone(), similarity: 1.0 - i as f64 / 10.0 }).collect();
                RankedList::from_scores(q, items)
            })
            .collect();
        let mut last = 0.0;
        for k in 1..=9 {
            let s = topk_success(&lists, &truth, k).unwrap();
            prop_assert!((0.0..=100.0).contains(&s));
            prop_assert!(s >= last);
            let expected = 100.0 * ranks.iter().filter(|&&p| p < k).count() as f64 / ranks.len() as f64;
            prop_assert!((s - expected).abs() < 1e-9);
            last = s;
        }
        prop_assert_eq!(last, 100.0);
    }
}
