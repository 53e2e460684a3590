mod common;

use ndarray::{Array2, Array3, Axis};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sfuda_core::losses::{
    cross_entropy_pseudo, entropy_increase_loss, self_entropy, total_adaptation_loss, weight_consolidation_penalty,
    EntropyMode, LossConfig,
};
use sfuda_core::metrics::{dice, stability_report};
use sfuda_core::model::{build_model, decode_checkpoint, encode_checkpoint, BnMode, Checkpoint, ModelDescriptor, Tensor};
use sfuda_core::pseudolabel::{
    dtpl_pseudo_label, intra_class_thresholds, label_coverage_stats, ld_pseudo_label, ThresholdConfig,
};
use sfuda_core::{ParamTensor, ParameterSnapshot, ProbMap, PseudoLabelMap};

use common::*;

/// `(probabilities, labels)` built from a seed so shrinking stays cheap.
fn map_pair(seed: u64, h: usize, w: usize, c: usize, keep: f64) -> (ProbMap, PseudoLabelMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = random_probs(&mut rng, h, w, c);
    let y = random_labels(&mut rng, h, w, c, keep);
    (p, y)
}

fn dims() -> impl Strategy<Value = (u64, usize, usize, usize)> {
    (any::<u64>(), 1usize..=8, 1usize..=8, 2usize..=5)
}

/// Row-major permutation of the pixel grid, applied to both inputs.
fn permute_pixels(p: &ProbMap, y: &PseudoLabelMap, perm: &[usize]) -> (ProbMap, PseudoLabelMap) {
    let (h, w, c) = p.dim();
    let pv = Array3::from_shape_fn((h, w, c), |(r, col, k)| {
        let src = perm[r * w + col];
        p.values()[[src / w, src % w, k]]
    });
    let yl = Array2::from_shape_fn((h, w), |(r, col)| {
        let src = perm[r * w + col];
        y.labels()[[src / w, src % w]]
    });
    (ProbMap::new(pv).unwrap(), PseudoLabelMap::new(yl, c).unwrap())
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

fn snapshot(values: &[f64]) -> ParameterSnapshot<f64> {
    ParameterSnapshot::new(vec![ParamTensor::new("w", vec![values.len()], values.to_vec()).unwrap()]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn probmaps_are_distributions((seed, h, w, c) in dims()) {
        let (p, _) = map_pair(seed, h, w, c, 0.5);
        for lane in p.values().lanes(Axis(2)) {
            prop_assert!(lane.iter().all(|&q| (0.0..=1.0).contains(&q)));
            prop_assert!((lane.sum() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn label_maps_are_one_hot_or_abstain((seed, h, w, c) in dims(), keep in 0.0f64..1.0) {
        let (_, y) = map_pair(seed, h, w, c, keep);
        let oh = y.to_one_hot();
        for lane in oh.lanes(Axis(2)) {
            prop_assert!(lane.iter().all(|&v| v <= 1));
            prop_assert!(lane.iter().map(|&v| v as usize).sum::<usize>() <= 1);
        }
        prop_assert_eq!(PseudoLabelMap::from_one_hot(&oh).unwrap(), y);
    }

    #[test]
    fn entropy_increase_decomposes((seed, h, w, c) in dims(), keep in 0.0f64..1.0) {
        let (p, y) = map_pair(seed, h, w, c, keep);
        let mut plogp = 0.0;
        for ((r, col), l) in y.labels().indexed_iter() {
            if l.is_some() {
                plogp += (0..c).map(|k| p.values()[[r, col, k]]).filter(|&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>();
            }
        }
        let n = y.labeled_count().max(1) as f64;
        let lhs = entropy_increase_loss(&p, &y).unwrap();
        let rhs = cross_entropy_pseudo(&p, &y).unwrap() + plogp / n;
        prop_assert!((lhs - rhs).abs() < 1e-6);
    }

    #[test]
    fn losses_ignore_pixel_order((seed, h, w, c) in dims(), keep in 0.0f64..1.0, pseed in any::<u64>()) {
        let (p, y) = map_pair(seed, h, w, c, keep);
        let (pp, yp) = permute_pixels(&p, &y, &shuffled(h * w, pseed));
        prop_assert!((cross_entropy_pseudo(&p, &y).unwrap() - cross_entropy_pseudo(&pp, &yp).unwrap()).abs() < 1e-12);
        prop_assert!((entropy_increase_loss(&p, &y).unwrap() - entropy_increase_loss(&pp, &yp).unwrap()).abs() < 1e-12);
        prop_assert!((self_entropy(&p) - self_entropy(&pp)).abs() < 1e-12);
    }

    #[test]
    fn self_entropy_is_bounded((seed, h, w, c) in dims()) {
        let (p, _) = map_pair(seed, h, w, c, 0.0);
        let hv = self_entropy(&p);
        prop_assert!(hv >= -1e-12 && hv <= (c as f64).ln() + 1e-12);
    }

    #[test]
    fn mixing_toward_uniform_raises_binary_entropy(q in 0.0f64..=1.0, t in 0.0f64..=1.0) {
        let at = |v: f64| self_entropy(&ProbMap::new(Array3::from_shape_vec((1, 1, 2), vec![v, 1.0 - v]).unwrap()).unwrap());
        let mixed = (1.0 - t) * q + t * 0.5;
        prop_assert!(at(mixed) >= at(q) - 1e-12);
    }

    #[test]
    fn breakdown_composes(
        (seed, h, w, c) in dims(),
        use_ei in any::<bool>(),
        mode in 0usize..3,
        ecoef in 0.0f64..3.0,
        use_wc in any::<bool>(),
        wcoef in 0.0f64..3.0,
        normalized in any::<bool>(),
        offsets in prop::collection::vec(-1.0f64..1.0, 1..12),
    ) {
        let entropy_mode = match mode {
            0 => EntropyMode::None,
            1 if !use_ei => EntropyMode::Min,
            _ => EntropyMode::Max,
        };
        let cfg = LossConfig { use_ei, entropy_mode, entropy_coefficient: ecoef, use_wc, wc_coefficient: wcoef, wc_normalized: normalized };
        let (p, y) = map_pair(seed, h, w, c, 0.6);
        let theta = snapshot(&offsets);
        let anchor = snapshot(&vec![0.0; offsets.len()]);
        let b = total_adaptation_loss(&p, &y, theta.entries(), &anchor, &cfg).unwrap();
        prop_assert!(b.wc_penalty >= 0.0);
        prop_assert!(b.composition_residual(&cfg) < 1e-6);
        // independent recomposition
        let adaptation = if use_ei { entropy_increase_loss(&p, &y).unwrap() } else { cross_entropy_pseudo(&p, &y).unwrap() };
        let sign = match entropy_mode { EntropyMode::None => 0.0, EntropyMode::Min => 1.0, EntropyMode::Max => -1.0 };
        let raw: f64 = offsets.iter().map(|v| v.abs()).sum();
        let penalty = if normalized { raw / offsets.len() as f64 } else { raw };
        let want = adaptation + sign * ecoef * self_entropy(&p) + if use_wc { wcoef * penalty } else { 0.0 };
        prop_assert!((b.total - want).abs() < 1e-9);
    }

    #[test]
    fn wc_penalty_is_a_metric(
        a in prop::collection::vec(-2.0f64..2.0, 6),
        b in prop::collection::vec(-2.0f64..2.0, 6),
        c in prop::collection::vec(-2.0f64..2.0, 6),
    ) {
        let (sa, sb, sc) = (snapshot(&a), snapshot(&b), snapshot(&c));
        let d = |x: &ParameterSnapshot<f64>, y: &ParameterSnapshot<f64>| weight_consolidation_penalty(x.entries(), y).unwrap();
        prop_assert!(d(&sa, &sb) >= 0.0);
        prop_assert_eq!(d(&sa, &sa), 0.0);
        prop_assert!((d(&sa, &sb) - d(&sb, &sa)).abs() < 1e-12);
        prop_assert!(d(&sa, &sc) <= d(&sa, &sb) + d(&sb, &sc) + 1e-12);
    }

    #[test]
    fn thresholds_are_probabilities_or_sentinel((seed, h, w, c) in dims(), alpha in 0.01f64..=1.0) {
        let (p, _) = map_pair(seed, h, w, c, 0.0);
        let t = intra_class_thresholds(&p, alpha).unwrap();
        for (d, n) in t.delta.iter().zip(&t.support_count) {
            if *n == 0 {
                prop_assert_eq!(*d, f64::INFINITY);
            } else {
                prop_assert!((0.0..=1.0).contains(d));
            }
        }
        prop_assert_eq!(t.support_count.iter().sum::<usize>(), h * w);
    }

    #[test]
    fn dtpl_matches_brute_force((seed, h, w) in (any::<u64>(), 1usize..=6, 1usize..=6), c in 2usize..=3, num in 1usize..=10, lambda in 0.0f64..0.99) {
        let (p, _) = map_pair(seed, h, w, c, 0.0);
        let cfg = ThresholdConfig::new(num as f64 / 10.0, lambda).unwrap();
        let got = dtpl_pseudo_label(&p, &cfg).unwrap();
        prop_assert_eq!(got.labels(), &threshold_oracle(p.values(), num, 10, Some(lambda)));
        let ld = ld_pseudo_label(&p, num as f64 / 10.0).unwrap();
        prop_assert_eq!(ld.labels(), &threshold_oracle(p.values(), num, 10, None));
    }

    #[test]
    fn labels_follow_the_argmax((seed, h, w, c) in dims(), alpha in 0.01f64..=1.0, lambda in 0.0f64..0.99) {
        let (p, _) = map_pair(seed, h, w, c, 0.0);
        let y = dtpl_pseudo_label(&p, &ThresholdConfig::new(alpha, lambda).unwrap()).unwrap();
        let am = p.argmax();
        for ((r, col), l) in y.labels().indexed_iter() {
            if let Some(l) = l {
                prop_assert_eq!(*l as usize, am[[r, col]]);
            }
        }
    }

    #[test]
    fn threshold_subsets(
        (seed, h, w, c) in dims(),
        a in 0.01f64..=1.0, b in 0.01f64..=1.0,
        l in 0.0f64..0.99, m in 0.0f64..0.99,
    ) {
        let (p, _) = map_pair(seed, h, w, c, 0.0);
        let (a1, a2, l1, l2) = (a.min(b), a.max(b), l.min(m), l.max(m));
        let dtpl = |a, l| dtpl_pseudo_label(&p, &ThresholdConfig::new(a, l).unwrap()).unwrap();
        prop_assert!(is_subset(&dtpl(a1, l2), &dtpl(a1, l1)));
        prop_assert!(is_subset(&ld_pseudo_label(&p, a1).unwrap(), &ld_pseudo_label(&p, a2).unwrap()));
        prop_assert!(is_subset(&dtpl(a1, l1), &ld_pseudo_label(&p, a1).unwrap()));
    }

    #[test]
    fn labelers_commute_with_pixel_permutation((seed, h, w, c) in dims(), pseed in any::<u64>(), alpha in 0.01f64..=1.0) {
        let (p, y0) = map_pair(seed, h, w, c, 0.0);
        let perm = shuffled(h * w, pseed);
        let (pp, _) = permute_pixels(&p, &y0, &perm);
        let cfg = ThresholdConfig::new(alpha, 0.2).unwrap();
        let (_, moved) = permute_pixels(&p, &dtpl_pseudo_label(&p, &cfg).unwrap(), &perm);
        prop_assert_eq!(dtpl_pseudo_label(&pp, &cfg).unwrap(), moved);
    }

    #[test]
    fn coverage_matches_tally((seed, h, w, c) in dims(), keep in 0.0f64..1.0) {
        let (_, y) = map_pair(seed, h, w, c, keep);
        let s = label_coverage_stats(&y);
        for k in 0..c {
            let n = y.labels().iter().filter(|l| **l == Some(k as u16)).count();
            prop_assert_eq!(s.counts[k], n);
        }
        prop_assert_eq!(s.labeled, y.labeled_count());
        prop_assert_eq!(s.total, h * w);
    }

    #[test]
    fn dice_is_symmetric_and_permutation_invariant(
        a in prop::collection::vec(0u8..3, 36),
        b in prop::collection::vec(0u8..3, 36),
        pseed in any::<u64>(),
        class in 0u8..3,
    ) {
        let pa = Array2::from_shape_vec((6, 6), a.clone()).unwrap();
        let pb = Array2::from_shape_vec((6, 6), b.clone()).unwrap();
        let d = dice(&pa, &pb, class).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, dice(&pb, &pa, class).unwrap());
        let perm = shuffled(36, pseed);
        let qa = Array2::from_shape_vec((6, 6), perm.iter().map(|&i| a[i]).collect()).unwrap();
        let qb = Array2::from_shape_vec((6, 6), perm.iter().map(|&i| b[i]).collect()).unwrap();
        prop_assert_eq!(d, dice(&qa, &qb, class).unwrap());
        let same = a.iter().zip(&b).all(|(x, y)| (*x == class) == (*y == class));
        prop_assert_eq!(d == 1.0, same);
    }

    #[test]
    fn stability_report_tracks_best_and_final(series in prop::collection::vec(0.0f64..1.0, 1..60), tail in prop::collection::vec(0.0f64..1.0, 0..10)) {
        let r = stability_report(&series, &[1, 5, 50]).unwrap();
        let best = series.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(r.best_dice, best);
        prop_assert_eq!(series[r.best_epoch - 1], best);
        prop_assert!(series[..r.best_epoch - 1].iter().all(|&v| v < best));
        prop_assert_eq!(r.final_dice, *series.last().unwrap());
        prop_assert!((r.degradation_gap - (best - r.final_dice)).abs() < 1e-15);
        // appending epochs no better than the best keeps the best epoch
        let mut longer = series.clone();
        longer.extend(tail.iter().map(|v| v * best));
        let r2 = stability_report(&longer, &[1]).unwrap();
        prop_assert_eq!(r2.best_epoch, r.best_epoch);
        prop_assert_eq!(r2.final_dice, *longer.last().unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoints_round_trip_forward_outputs(seed in any::<u64>(), xs in prop::collection::vec(0.0f32..1.0, 64)) {
        let model = build_model(ModelDescriptor { channels: vec![4, 8], seed, ..ModelDescriptor::default() }).unwrap();
        let bytes = encode_checkpoint(&Checkpoint::from_model(&model));
        let back = decode_checkpoint(&bytes, std::path::Path::new("mem")).unwrap().to_model().unwrap();
        let x = Tensor::from_vec(1, 1, 8, 8, xs);
        let a = model.forward(&x, BnMode::Running).unwrap();
        let b = back.forward(&x, BnMode::Running).unwrap();
        prop_assert!(a.data.iter().map(|v| v.to_bits()).eq(b.data.iter().map(|v| v.to_bits())));
        prop_assert_eq!(back.snapshot(), model.snapshot());
    }
}
