mod common;

use connseg::codec::ConnectivityCube;
use connseg::grid::{BinaryMask, PatternKind};
use connseg::metrics::{
    evaluate_dataset, f_beta, map_r, map_r_dataset, max_f_measure, threshold_grid, InstanceSet, ScoreMap, BETA2,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 8×8 soft cube: the encoded ground truth blurred with noise.
fn constructed(rng: &mut ChaCha8Rng, kind: PatternKind) -> (ConnectivityCube, BinaryMask) {
    let offs = common::table(&kind.to_string());
    let mut bits = common::random_bits(rng, 64, 0.45);
    common::strip_isolated(&mut bits, 8, 8, offs);
    let hard = common::encode(&bits, 8, 8, offs);
    let soft: Vec<f32> = hard
        .iter()
        .map(|&v| (0.6 * v + 0.4 * rng.random::<f32>()).clamp(0.0, 1.0))
        .collect();
    (
        ConnectivityCube::new(8, 8, kind, soft).unwrap(),
        BinaryMask::new(8, 8, bits).unwrap(),
    )
}

#[test]
fn max_f_matches_exhaustive_sweep_oracle() {
    let grid = threshold_grid(256).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for kind in PatternKind::ALL {
        let offs = common::table(&kind.to_string());
        for _ in 0..10 {
            let (cube, gt) = constructed(&mut rng, kind);
            let single = max_f_measure(&ScoreMap::connectivity(&cube), &gt, &grid).unwrap();
            let (f, t) = common::sweep_max_f(&[(cube.values().to_vec(), gt.data().to_vec())], 8, 8, offs, &grid);
            assert!((single.max_f - f).abs() < 1e-12);
            assert_eq!(single.best_t, t);
        }
        let items: Vec<_> = (0..6)
            .map(|i| {
                let (c, g) = constructed(&mut rng, kind);
                (i.to_string(), c, g)
            })
            .collect();
        let eval = evaluate_dataset(
            &items
                .iter()
                .map(|(n, c, g)| (n.clone(), ScoreMap::connectivity(c), g.clone()))
                .collect::<Vec<_>>(),
            &grid,
        )
        .unwrap();
        let oracle_in: Vec<_> = items.iter().map(|(_, c, g)| (c.values().to_vec(), g.data().to_vec())).collect();
        let (f, t) = common::sweep_max_f(&oracle_in, 8, 8, offs, &grid);
        assert!((eval.max_f - f).abs() < 1e-12);
        assert_eq!(eval.best_t, t);
        assert_eq!(eval.per_image.len(), 6);
    }
}

#[test]
fn exact_prediction_scores_one_and_empty_scores_zero() {
    let grid = threshold_grid(256).unwrap();
    let gt = BinaryMask::from_fn(8, 8, |r, c| (2..6).contains(&r) && (1..7).contains(&c)).unwrap();
    let cube = connseg::encode(&gt, PatternKind::N8);
    let r = max_f_measure(&ScoreMap::connectivity(&cube), &gt, &grid).unwrap();
    assert_eq!(r.max_f, 1.0);
    assert!(r.curve.iter().all(|p| p.f_beta == 1.0));
    let zero = ConnectivityCube::zeros(8, 8, PatternKind::N8);
    let r = max_f_measure(&ScoreMap::connectivity(&zero), &gt, &grid).unwrap();
    assert!(r.curve.iter().all(|p| p.recall == 0.0 && p.f_beta == 0.0));
    let wrong = BinaryMask::empty(7, 8).unwrap();
    assert!(max_f_measure(&ScoreMap::connectivity(&zero), &wrong, &grid).is_err());
}

#[test]
fn monotone_rescale_preserves_binarizations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (cube, _) = constructed(&mut rng, PatternKind::N8);
    let grid = threshold_grid(64).unwrap();
    // squaring is strictly monotone on [0, 1]; thresholds move with it
    let squared = ConnectivityCube::new(8, 8, PatternKind::N8, cube.values().iter().map(|v| v * v).collect()).unwrap();
    let (a, b) = (ScoreMap::connectivity(&cube), ScoreMap::connectivity(&squared));
    for &t in &grid {
        let t2 = f64::from((t as f32) * (t as f32));
        if (t as f32) as f64 != t || t2 <= 0.0 {
            continue;
        }
        assert_eq!(a.binarize(t).unwrap(), b.binarize(t2).unwrap());
    }
}

#[test]
fn recall_non_increasing_in_threshold() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for kind in PatternKind::ALL {
        let (cube, gt) = constructed(&mut rng, kind);
        let r = max_f_measure(&ScoreMap::connectivity(&cube), &gt, &threshold_grid(256).unwrap()).unwrap();
        for w in r.curve.windows(2) {
            assert!(w[1].recall <= w[0].recall);
        }
    }
}

proptest! {
    #[test]
    fn f_beta_between_p_and_r(p in 0.001f64..=1.0, r in 0.001f64..=1.0) {
        let f = f_beta(p, r, BETA2).unwrap();
        prop_assert!(f <= p.max(r) + 1e-12 && f >= p.min(r) - 1e-12);
    }

    #[test]
    fn map_is_order_invariant_for_distinct_scores(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let masks: Vec<BinaryMask> = (0..5)
            .map(|_| BinaryMask::new(4, 4, common::random_bits(&mut rng, 16, 0.5)).unwrap())
            .collect();
        let gt: Vec<BinaryMask> = (0..3)
            .map(|_| BinaryMask::new(4, 4, common::random_bits(&mut rng, 16, 0.5)).unwrap())
            .collect();
        let preds: Vec<(BinaryMask, f64)> = masks.into_iter().enumerate().map(|(i, m)| (m, i as f64 * 0.1 + 0.05)).collect();
        let mut rev = preds.clone();
        rev.reverse();
        let a = map_r(&InstanceSet { predictions: preds, ground_truth: gt.clone() }, 0.5).unwrap();
        let b = map_r(&InstanceSet { predictions: rev, ground_truth: gt }, 0.5).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((0.0..=1.0).contains(&a));
    }
}

#[test]
fn pooled_map_counts_all_ground_truth() {
    let a = BinaryMask::from_fn(4, 4, |r, _| r < 2).unwrap();
    let b = BinaryMask::from_fn(4, 4, |r, _| r >= 2).unwrap();
    let hit = InstanceSet {
        predictions: vec![(a.clone(), 0.9)],
        ground_truth: vec![a],
    };
    let miss = InstanceSet {
        predictions: vec![],
        ground_truth: vec![b],
    };
    assert_eq!(map_r_dataset(&[hit, miss], 0.5).unwrap(), 0.5);
}
