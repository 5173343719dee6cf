use maeface::data::{subsample_every_n, Manifest, SampleRecord};
use maeface::losses::{denormalize_intensity, normalize_intensity};
use maeface::metrics::{f1_scores, icc31, kfold_by_subject};
use maeface::ndgrad::{Tape, Tensor};
use maeface::rng::{stream, Concern};
use maeface::vitmae::{patchify, sample_mask, unpatchify, visible_count};
use proptest::prelude::*;

fn manifest(frames_per_subject: &[usize]) -> Manifest {
    let mut m = Manifest::new("prop", vec!["AU1".into()]);
    for (s, &n) in frames_per_subject.iter().enumerate() {
        for f in 0..n {
            m.records.push(SampleRecord::new(format!("s{s}_{f}.pgm"), format!("S{s:02}"), f as u64));
        }
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn patchify_round_trips(c in 1usize..4, grid in 1usize..5, p in 1usize..5, seed in any::<u64>()) {
        let side = grid * p;
        let mut k = seed;
        let img = Tensor::from_fn(vec![c, side, side], |_| {
            k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (k >> 40) as f32
        });
        let patches = patchify(&img, p).unwrap();
        prop_assert_eq!(patches.shape(), &[grid * grid, p * p * c][..]);
        let back = unpatchify(&patches, c, p).unwrap();
        prop_assert_eq!(back.data(), img.data());
    }

    #[test]
    fn masks_are_permutations_with_exact_counts(n in 1usize..300, ratio in 0.0f64..0.999, seed in any::<u64>()) {
        let drawn = sample_mask(n, ratio, &mut stream(seed, Concern::Mask, 0, 0));
        let vis = visible_count(n, ratio);
        prop_assert_eq!(vis, ((n as f64) * (1.0 - ratio) + 1e-9).floor() as usize);
        if vis == 0 {
            prop_assert!(drawn.is_err());
            return Ok(());
        }
        let plan = drawn.unwrap();
        prop_assert_eq!(plan.num_visible(), vis);
        prop_assert_eq!(plan.num_masked(), n - vis);
        let mut perm = plan.permutation().to_vec();
        perm.sort_unstable();
        prop_assert_eq!(perm, (0..n).collect::<Vec<_>>());
        let flags = plan.mask_flags();
        prop_assert_eq!(flags.iter().filter(|&&f| f).count(), n - vis);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..8, scale in 0.1f64..500.0, seed in any::<u64>()) {
        let mut k = seed;
        let x = Tensor::from_fn(vec![rows, cols], |_| {
            k = k.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((k >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * scale
        });
        let mut t = Tape::new();
        let v = t.leaf(&x);
        let y = t.softmax(v).unwrap();
        for r in t.value(y).chunks(cols) {
            prop_assert!(r.iter().all(|p| p.is_finite() && *p >= 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn subsampling_keeps_ceil_per_subject(frames in prop::collection::vec(1usize..60, 1..6), n in 1usize..20) {
        let m = manifest(&frames);
        let sub = subsample_every_n(&m, n).unwrap();
        let want: usize = frames.iter().map(|f| f.div_ceil(n)).sum();
        prop_assert_eq!(sub.len(), want);
        prop_assert!(sub.records.iter().all(|r| r.frame % n as u64 == 0));
    }

    #[test]
    fn folds_partition_subjects(subjects in 2usize..45, k in 2usize..6, seed in any::<u64>()) {
        prop_assume!(subjects >= k);
        let m = manifest(&vec![2; subjects]);
        let folds = kfold_by_subject(&m, k, seed).unwrap();
        let mut all: Vec<String> = folds.folds.concat();
        all.sort();
        prop_assert_eq!(all, m.subjects());
        let sizes: Vec<usize> = folds.folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn intensity_scale_round_trips(level in 0u8..=5, out in -3.0f64..3.0) {
        prop_assert_eq!(denormalize_intensity(&[normalize_intensity(level)])[0], level as f64);
        let d = denormalize_intensity(&[out])[0];
        prop_assert!((0.0..=5.0).contains(&d));
    }

    #[test]
    fn metrics_are_bounded(bits in prop::collection::vec((0u8..2, 0u8..2), 1..50), shift in -2.0f64..2.0) {
        let pred: Vec<Vec<u8>> = bits.iter().map(|b| vec![b.0]).collect();
        let gt: Vec<Vec<u8>> = bits.iter().map(|b| vec![b.1]).collect();
        let f = f1_scores(&pred, &gt).unwrap()[0].f1;
        prop_assert!((0.0..=1.0).contains(&f));
        let x: Vec<f64> = bits.iter().enumerate().map(|(i, b)| i as f64 * 0.3 + b.0 as f64).collect();
        if x.len() >= 2 {
            let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
            let icc = icc31(&shifted, &x).unwrap().unwrap();
            prop_assert!((icc - 1.0).abs() < 1e-9);
        }
    }
}
