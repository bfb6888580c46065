use std::collections::HashMap;

use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wvad::data::{labeled_count, split_weak_labels, standardize, LabeledDataset, RawData};
use wvad::metrics::{auprc, auroc};
use wvad::trainer::BalancedSampler;
use wvad::vae::RowKind;

/// Integer-valued scores (so affine maps stay exact) with both classes.
fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec((-500i32..500).prop_map(f64::from), n),
            prop::collection::vec(0u8..2, n),
        )
            .prop_map(|(s, mut l)| {
                l[0] = 1;
                l[1] = 0;
                (s, l)
            })
    })
}

proptest! {
    #[test]
    fn auroc_ignores_monotone_transforms((s, l) in scored()) {
        let base = auroc(&s, &l).unwrap();
        let affine: Vec<f64> = s.iter().map(|v| 2.0 * v + 5.0).collect();
        let squashed: Vec<f64> = s.iter().map(|v| v.atan()).collect();
        prop_assert_eq!(auroc(&affine, &l).unwrap(), base);
        prop_assert_eq!(auroc(&squashed, &l).unwrap(), base);
        prop_assert_eq!(auprc(&affine, &l).unwrap(), auprc(&s, &l).unwrap());
    }

    #[test]
    fn negated_scores_flip_auroc((s, l) in scored()) {
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        let sum = auroc(&s, &l).unwrap() + auroc(&neg, &l).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_ignore_row_order((s, l) in scored(), seed in any::<u64>()) {
        let mut idx: Vec<usize> = (0..s.len()).collect();
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        let ps: Vec<f64> = idx.iter().map(|&i| s[i]).collect();
        let pl: Vec<u8> = idx.iter().map(|&i| l[i]).collect();
        prop_assert_eq!(auroc(&ps, &pl).unwrap(), auroc(&s, &l).unwrap());
        prop_assert_eq!(auprc(&ps, &pl).unwrap(), auprc(&s, &l).unwrap());
    }

    #[test]
    fn metrics_stay_in_unit_interval((s, l) in scored()) {
        for m in [auroc(&s, &l).unwrap(), auprc(&s, &l).unwrap()] {
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }

    #[test]
    fn sampler_balances_every_batch(
        u in 1usize..300,
        a in 1usize..40,
        b in 2usize..80,
        seed in any::<u64>(),
    ) {
        let sampler = BalancedSampler::from_indices((0..u).collect(), (u..u + a).collect(), b).unwrap();
        let batches = sampler.epoch(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(batches.len(), sampler.batches_per_epoch());
        let mut seen: HashMap<usize, usize> = HashMap::new();
        for batch in &batches {
            let unl: Vec<usize> = batch
                .rows
                .iter()
                .zip(&batch.kinds)
                .filter(|(_, k)| **k == RowKind::Unlabeled)
                .map(|(&r, _)| r)
                .collect();
            prop_assert!(unl.len() <= b.div_ceil(2));
            prop_assert_eq!(batch.anomalies(), (b / 2).min(unl.len()));
            prop_assert!(batch.len() <= b);
            for r in unl {
                prop_assert!(r < u);
                *seen.entry(r).or_default() += 1;
            }
            for (&r, k) in batch.rows.iter().zip(&batch.kinds) {
                if *k == RowKind::LabeledAnomaly {
                    prop_assert!((u..u + a).contains(&r));
                }
            }
        }
        prop_assert_eq!(seen.len(), u);
        prop_assert!(seen.values().all(|&c| c == 1));
    }

    #[test]
    fn weak_labels_are_true_anomalies(
        truth in prop::collection::vec(0u8..2, 1..200),
        ratio in 0.01f64..0.99,
        seed in any::<u64>(),
    ) {
        let anomalies = truth.iter().filter(|&&t| t == 1).count();
        let count = labeled_count(ratio, anomalies);
        match split_weak_labels(&truth, ratio, seed) {
            Ok(weak) => {
                prop_assert_eq!(weak.iter().filter(|&&w| w == 1).count(), count);
                prop_assert!(weak.iter().zip(&truth).all(|(&w, &t)| w == 0 || t == 1));
                let other = split_weak_labels(&truth, ratio, seed.wrapping_add(1)).unwrap();
                prop_assert_eq!(other.iter().filter(|&&w| w == 1).count(), count);
            }
            Err(_) => prop_assert_eq!(count, 0),
        }
    }

    #[test]
    fn standardized_columns_are_z_scores(
        rows in 2usize..60,
        cols in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((rows, cols), |(_, j)| {
            (j as f64 + 1.0) * 10.0 * rand::Rng::random_range(&mut rng, -1.0..1.0) + 100.0 * j as f64
        });
        let (z, stats) = standardize(x.view()).unwrap();
        for (j, col) in z.columns().into_iter().enumerate() {
            if stats.constant_columns.contains(&j) {
                continue;
            }
            let n = rows as f64;
            let mean = col.sum() / n;
            let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((std - 1.0).abs() < 1e-6);
        }
        let (again, _) = standardize(z.view()).unwrap();
        prop_assert!((&again - &z).iter().all(|d| d.abs() < 1e-9));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn prepared_dataset_round_trips(
        rows in 3usize..40,
        cols in 1usize..5,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = Array2::from_shape_fn((rows, cols), |_| rand::Rng::random_range(&mut rng, -1e3..1e3));
        let mut labels: Vec<u8> = (0..rows).map(|i| u8::from(i % 3 == 0)).collect();
        labels[1] = 1;
        let raw = RawData { features, labels };
        let data = LabeledDataset::prepare(&raw, 0.5, seed, "prop.csv").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        data.save(&path).unwrap();
        let back = LabeledDataset::load(&path).unwrap();
        prop_assert!((&back.features - &data.features).iter().all(|d| d.abs() <= 1e-12));
        prop_assert_eq!(&back.weak_labels, &data.weak_labels);
        prop_assert_eq!(&back.truth, &data.truth);
        prop_assert_eq!(&back.standardization, &data.standardization);
        prop_assert_eq!(&back.provenance, &data.provenance);
    }
}
