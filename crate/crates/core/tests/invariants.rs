//! Property tests of cross-module invariants through the public API.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use oodseg::scoring::pixel_score;
use oodseg::{
    auroc, average_precision, compose, divergence_to_uniform, fuse, sample_batch_specs, select_threshold,
    DivergenceKind, ImageTensor, LabelMap, OodAccumulator, OodScoreKind, ScoreMap,
};

fn softmax(l: &[f64]) -> Vec<f64> {
    let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

proptest! {
    #[test]
    fn divergences_are_nonnegative_and_bounded(l in proptest::collection::vec(-30.0f64..30.0, 2..25)) {
        let p = softmax(&l);
        for kind in DivergenceKind::ALL {
            let d = divergence_to_uniform(kind, &p).unwrap();
            prop_assert!(d >= -1e-12, "{kind} {d}");
            if let Some(b) = kind.upper_bound(l.len()) {
                prop_assert!(d <= b + 1e-12, "{kind} {d} > {b}");
            }
        }
    }

    #[test]
    fn divergence_scores_peak_at_uniform(k in 2usize..20, t in 0.1f64..20.0) {
        let flat = vec![0.5; k];
        for kind in [OodScoreKind::Jsd, OodScoreKind::Kl, OodScoreKind::Rkl] {
            prop_assert!(pixel_score(kind, &flat, t).abs() < 1e-12);
        }
    }

    #[test]
    fn higher_temperature_never_lowers_jsd_score(seed in 0u64..400) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(2..12);
        let l: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
        let (t1, t2) = (rng.random_range(0.2..5.0), rng.random_range(5.0..50.0));
        prop_assert!(pixel_score(OodScoreKind::Jsd, &l, t2) >= pixel_score(OodScoreKind::Jsd, &l, t1) - 1e-12);
    }

    #[test]
    fn threshold_is_tightest(v in proptest::collection::vec(-100i32..100, 1..200), tpr in 0.0f64..=1.0) {
        let s: Vec<f64> = v.iter().map(|&x| x as f64).collect();
        let d = select_threshold(&s, tpr).unwrap();
        let above = |t: f64| s.iter().filter(|&&x| x > t).count() as f64;
        let n = s.len() as f64;
        prop_assert!(above(d) >= (tpr * n - 1e-9).ceil());
        // any larger data value drops below the requested rate
        for &x in s.iter().filter(|&&x| x > d) {
            prop_assert!(above(x) < (tpr * n - 1e-9).ceil());
        }
    }

    #[test]
    fn fusion_is_monotone_in_threshold(seed in 0u64..300) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, k) = (9, 7, 4);
        let closed = LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..k as u8)).collect()).unwrap();
        let scores = ScoreMap::new(h, w, (0..h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
        let (lo, hi) = (rng.random_range(-1.0..0.0), rng.random_range(0.0..1.0));
        let a = fuse(&closed, &scores, lo, k).unwrap().labels;
        let b = fuse(&closed, &scores, hi, k).unwrap().labels;
        for i in 0..h * w {
            let (la, lb, c) = (a.ids()[i], b.ids()[i], closed.ids()[i]);
            prop_assert!(la == c || la == k as u8);
            prop_assert!(lb == c || lb == k as u8);
            // an outlier at the higher threshold is an outlier at the lower one
            prop_assert!(lb != k as u8 || la == k as u8);
        }
        // fusing a fused map again at the same threshold changes nothing
        prop_assert_eq!(fuse(&a, &scores, lo, k).unwrap().labels, a);
    }

    #[test]
    fn ranking_metrics_ignore_monotone_rescaling(seed in 0u64..300, scale in 0.01f64..100.0, shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(4..300);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..30) as f64).collect();
        let mut y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        y[0] = true;
        y[1] = false;
        let t: Vec<f64> = s.iter().map(|v| (v * scale + shift).powi(3)).collect();
        prop_assert!((average_precision(&s, &y).unwrap() - average_precision(&t, &y).unwrap()).abs() < 1e-12);
        prop_assert!((auroc(&s, &y).unwrap() - auroc(&t, &y).unwrap()).abs() < 1e-12);
        let flipped: Vec<bool> = y.iter().map(|b| !b).collect();
        prop_assert!((auroc(&s, &y).unwrap() + auroc(&s, &flipped).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn per_image_accumulation_equals_pooled(seed in 0u64..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, k, m) = (6, 5, 3, 4);
        let mut all = OodAccumulator::new();
        let mut shards = vec![OodAccumulator::new(), OodAccumulator::new()];
        for i in 0..m {
            let lbl = LabelMap::new(h, w, (0..h * w).map(|_| if rng.random_bool(0.3) { k as u8 } else { rng.random_range(0..k as u8) }).collect()).unwrap();
            let sc = ScoreMap::new(h, w, (0..h * w).map(|_| rng.random::<f32>()).collect()).unwrap();
            all.add(&sc, &lbl, k).unwrap();
            shards[i % 2].add(&sc, &lbl, k).unwrap();
        }
        let mut merged = shards.remove(0);
        merged.merge(&shards[0]);
        let (a, b) = (all.result(None), merged.result(None));
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert!((a.ap - b.ap).abs() < 1e-12);
                prop_assert!((a.auroc - b.auroc).abs() < 1e-12);
                prop_assert_eq!(a.fpr95, b.fpr95);
            }
            (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
        }
    }

    #[test]
    fn composition_keeps_context_and_labels(seed in 0u64..300) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, h, w) = (3, rng.random_range(4..24), rng.random_range(4..24));
        let img = ImageTensor::new(c, h, w, (0..c * h * w).map(|_| rng.random::<f32>()).collect()).unwrap();
        let lbl = LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..5u8)).collect()).unwrap();
        let specs = sample_batch_specs(&mut rng, 3, (h, w), (1, h.min(w)), 1).unwrap();
        prop_assert!(specs.iter().all(|s| s.fits(h, w) && (s.height, s.width) == (specs[0].height, specs[0].width)));
        let spec = specs[0];
        let patch = ImageTensor::new(c, spec.height, spec.width, vec![2.0; c * spec.height * spec.width]).unwrap();
        let m = compose(&img, &lbl, &patch, &spec).unwrap();
        prop_assert_eq!(&m.labels, &lbl);
        prop_assert_eq!(m.mask.iter().filter(|&&b| b).count(), spec.height * spec.width);
        for y in 0..h {
            for x in 0..w {
                if !spec.contains(y, x) {
                    for ch in 0..c {
                        prop_assert_eq!(m.composed.get(ch, y, x).to_bits(), img.get(ch, y, x).to_bits());
                    }
                }
            }
        }
    }
}
