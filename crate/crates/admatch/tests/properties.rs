//! Randomized property tests over the scoring identity, AUC ranking
//! semantics, retrieval result invariants, and class-probability algebra.

use admatch::click_model::{pctr, Embedding96, ModelParams, EMBED_OUT};
use admatch::config::RunConfig;
use admatch::eval::auc;
use admatch::quantizer::QuantizerConfig;
use admatch::retrieval::{
    brute_force_topk, build_index, mips_transform, search_mips, weighted_score, AdSet, IndexMode,
    Objective,
};
use proptest::prelude::*;
use rand::Rng;

fn embedding(values: Vec<f64>) -> Embedding96 {
    let mut v = [0.0; EMBED_OUT];
    for (o, x) in v.iter_mut().zip(values) {
        *o = x;
    }
    Embedding96(v)
}

/// Nonzero vectors with coordinates in a sane range; the first coordinate
/// is kept away from zero so the norm never degenerates.
fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
    (
        prop::collection::vec(-10.0f64..10.0, EMBED_OUT - 1),
        prop_oneof![0.5f64..10.0, -10.0f64..-0.5],
    )
        .prop_map(|(mut tail, head)| {
            let mut v = vec![head];
            v.append(&mut tail);
            v
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // w * cos(x, y) equals <x/|x|, transform(y, w)> for any bounded
    // nonzero inputs and positive weights.
    #[test]
    fn weighted_cosine_identity(
        xv in vec_strategy(),
        yv in vec_strategy(),
        w in 0.01f64..100.0,
    ) {
        let x = embedding(xv);
        let y = embedding(yv);
        let direct = x.dot(&y) / (x.norm() * y.norm()) * w;
        let scored = weighted_score(&x, &y, w).unwrap();
        prop_assert!((direct - scored).abs() <= 1e-9, "{direct} vs {scored}");
        let t = mips_transform(&y, w).unwrap();
        let via = x.dot(&t) / x.norm();
        prop_assert!((direct - via).abs() <= 1e-9, "{direct} vs {via}");
    }

    // AUC depends only on the ranking: any strictly increasing transform
    // of the scores leaves it exactly unchanged.
    #[test]
    fn auc_is_rank_stat(
        pairs in prop::collection::vec((any::<bool>(), 0u8..32), 12..200),
        scale in 0.1f64..50.0,
        shift in -100.0f64..100.0,
    ) {
        let labels: Vec<bool> = pairs.iter().map(|p| p.0).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let scores: Vec<f64> = pairs.iter().map(|p| p.1 as f64 / 4.0).collect();
        let base = auc(&labels, &scores).unwrap();
        prop_assert!((0.0..=1.0).contains(&base));
        let affine: Vec<f64> = scores.iter().map(|s| scale * s + shift).collect();
        prop_assert_eq!(base, auc(&labels, &affine).unwrap());
        let curved: Vec<f64> = scores.iter().map(|s| (s / 3.0).exp()).collect();
        prop_assert_eq!(base, auc(&labels, &curved).unwrap());
    }

    // Class probabilities stay normalized and the click probability stays
    // monotone for arbitrary model seeds and similarity grids.
    #[test]
    fn class_probs_normalized_and_monotone(seed in 0u64..1000, n in 3usize..60) {
        let cfg = RunConfig::default();
        let params = ModelParams::new_random(&cfg, seed);
        let mut prev = f64::NEG_INFINITY;
        for i in 0..n {
            let s = -1.0 + 2.0 * (i as f64) / (n as f64 - 1.0);
            let probs = params.probs_from_similarity(s);
            prop_assert!((probs.sum() - 1.0).abs() <= 1e-9);
            let p = pctr(&probs);
            prop_assert!(p > 0.0 && p < 1.0);
            prop_assert!(p > prev, "pctr not monotone at s={s}");
            prev = p;
        }
    }
}

proptest! {
    // Index builds inside this block are costlier, so fewer cases.
    #![proptest_config(ProptestConfig::with_cases(12))]

    // Approximate search returns a sorted subset of the corpus ids with
    // at most K entries, and never invents or repeats an id; the top-1
    // under full probing with retained vectors matches brute force.
    #[test]
    fn search_results_well_formed(
        seed in 0u64..500,
        k in 1usize..25,
        nprobe in 1usize..6,
    ) {
        let mut rng = admatch::util::seeded_rng(seed, "prop-ads");
        let n = 120;
        let ids: Vec<u64> = (0..n as u64).map(|i| i * 3 + 7).collect();
        let vectors: Vec<Embedding96> = (0..n)
            .map(|_| {
                let row: Vec<f32> =
                    (0..EMBED_OUT).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
                Embedding96::from_f32(&row)
            })
            .collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..5.0)).collect();
        let ads = AdSet::new(&ids, &vectors, &weights).unwrap();
        let qcfg = QuantizerConfig {
            subspaces: 3,
            centroids: 16,
            coarse_centroids: 6,
            kmeans_max_iters: 8,
            alternations: 2,
            max_train_points: 0,
            seed,
        };
        let (index, _) = build_index(&ads, &qcfg, IndexMode::Pq, true).unwrap();

        let q = Embedding96::from_f32(
            &(0..EMBED_OUT).map(|_| rng.gen_range(-1.0f32..1.0)).collect::<Vec<_>>(),
        );
        let found = search_mips(&index, &q, k, nprobe, 40).unwrap();
        prop_assert!(found.entries.len() <= k);
        let id_set: std::collections::HashSet<u64> = ids.iter().copied().collect();
        for w in found.entries.windows(2) {
            prop_assert!(
                w[0].score > w[1].score
                    || (w[0].score == w[1].score && w[0].ad_id < w[1].ad_id)
            );
        }
        let mut seen = std::collections::HashSet::new();
        for e in &found.entries {
            prop_assert!(id_set.contains(&e.ad_id), "unknown id {}", e.ad_id);
            prop_assert!(seen.insert(e.ad_id), "repeated id {}", e.ad_id);
        }

        let full = search_mips(&index, &q, 1, index.n_coarse(), n).unwrap();
        let oracle = brute_force_topk(&q, &ads, 1, Objective::Weighted).unwrap();
        prop_assert_eq!(full, oracle);
    }
}
