use std::path::Path;

use asc_core::config::{lr_at, TrainConfig};
use asc_core::data::{augment_pair, epoch_sampler, index_dataset, ManifestRow, Split};
use asc_core::eval::{macro_f1, ConfusionMatrix};
use asc_core::features::frame_count;
use asc_core::model::{pool_attention, pool_max, Profile};
use asc_core::Tensor64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sequence() -> impl Strategy<Value = (Tensor64, Tensor64)> {
    (1usize..40, 1usize..10, 1usize..5).prop_flat_map(|(t, p, m)| {
        (
            prop::collection::vec(-5.0f64..5.0, t * p),
            prop::collection::vec(-2.0f64..2.0, m * p),
        )
            .prop_map(move |(h, v)| {
                (
                    Tensor64::new(&[t, p], h).unwrap(),
                    Tensor64::new(&[m, p], v).unwrap(),
                )
            })
    })
}

proptest! {
    #[test]
    fn scores_are_distributions_and_summaries_stay_in_the_hull(
        (h, v) in sequence(),
        temperature in 0.05f64..5.0,
    ) {
        let out = pool_attention(&h, &v, temperature).unwrap();
        let (t, p) = (h.shape()[0], h.shape()[1]);
        for i in 0..out.heads() {
            let a = out.scores.row(i);
            prop_assert!(a.iter().all(|&x| x >= 0.0));
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let s = out.summaries.row(i);
            for k in 0..p {
                let col = (0..t).map(|j| h.row(j)[k]);
                let lo = col.clone().fold(f64::INFINITY, f64::min);
                let hi = col.fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(s[k] >= lo - 1e-9 && s[k] <= hi + 1e-9);
            }
        }
        prop_assert_eq!(out.utterance().len(), out.heads() * p);
    }

    #[test]
    fn lower_temperature_never_flattens_the_peak((h, v) in sequence()) {
        let peaks: Vec<Vec<f64>> = [1.0, 0.5, 0.2, 0.1]
            .iter()
            .map(|&sigma| {
                let out = pool_attention(&h, &v, sigma).unwrap();
                (0..out.heads())
                    .map(|i| out.scores.row(i).iter().copied().fold(0.0, f64::max))
                    .collect()
            })
            .collect();
        for w in peaks.windows(2) {
            for (a, b) in w[0].iter().zip(&w[1]) {
                prop_assert!(b + 1e-12 >= *a);
            }
        }
    }

    #[test]
    fn time_max_dominates_every_frame((h, _) in sequence()) {
        let m = pool_max(&h).unwrap();
        for j in 0..h.shape()[0] {
            for (a, b) in h.row(j).iter().zip(&m) {
                prop_assert!(a <= b);
            }
        }
    }

    #[test]
    fn splice_length_and_offsets(
        len in 32_000usize..40_000,
        seed in any::<u64>(),
    ) {
        let a: Vec<f32> = (0..len).map(|i| i as f32).collect();
        let b: Vec<f32> = (0..len).map(|i| -(i as f32)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (out, off) = augment_pair(&a, &b, 4000, 4.0, &mut rng).unwrap();
        prop_assert_eq!(out.len(), 32_000);
        prop_assert!(off.first <= 16_000 && off.second <= 16_000);
        prop_assert_eq!(out[0], off.first as f32);
        prop_assert_eq!(out[16_000], -(off.second as f32));
    }

    #[test]
    fn balanced_epoch_takes_the_minority_count(
        counts in prop::collection::vec(1usize..30, 2..7),
        seed in any::<u64>(),
    ) {
        let rows: Vec<ManifestRow> = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| {
                (0..n).map(move |i| ManifestRow {
                    clip_id: format!("c{c}_{i}"),
                    channel: 0,
                    class_index: c,
                    path: format!("c{c}_{i}.wav"),
                })
            })
            .collect();
        let idx = index_dataset(&rows, counts.len(), Split::Train, Path::new("."), None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let epoch = epoch_sampler(&idx, &mut rng).unwrap();
        let min = *counts.iter().min().unwrap();
        prop_assert_eq!(epoch.len(), min * counts.len());
        let mut per_class = vec![0; counts.len()];
        let mut seen = std::collections::HashSet::new();
        for &i in &epoch {
            prop_assert!(seen.insert(i));
            per_class[idx.examples[i].class_index] += 1;
        }
        prop_assert!(per_class.iter().all(|&n| n == min));
    }

    #[test]
    fn macro_f1_is_bounded(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 0..200),
    ) {
        let mut conf = ConfusionMatrix::new(5);
        for &(t, p) in &pairs {
            conf.add(t, p).unwrap();
        }
        prop_assert_eq!(conf.total(), pairs.len() as u64);
        let r = macro_f1(&conf);
        prop_assert!((0.0..=1.0).contains(&r.macro_f1));
        if !pairs.is_empty() && pairs.iter().all(|(t, p)| t == p) {
            let present = (0..5).filter(|&c| conf.support(c) > 0).count() as f64;
            prop_assert!((r.macro_f1 - present / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn frames_cover_every_sample(n in 1usize..200_000, hop in 1usize..512) {
        let f = frame_count(n, hop);
        prop_assert!(f * hop >= n && (f - 1) * hop < n);
    }

    #[test]
    fn learning_rate_never_increases(epoch in 0usize..200) {
        let cfg = TrainConfig::for_profile(Profile::Full);
        prop_assert!(lr_at(epoch + 1, &cfg) <= lr_at(epoch, &cfg));
        prop_assert!(lr_at(epoch, &cfg) > 0.0);
    }
}
