//! Property tests over the numeric core: scan/merge structure, metric
//! identities, loss linearity, and scan causality/linearity.

use proptest::prelude::*;

use vmunet_core::loss::LossWeights;
use vmunet_core::metrics::{confusion, hd95, metrics};
use vmunet_core::ss2d::{scan_expand, scan_merge, ScanMaps};
use vmunet_core::ssm::{s6_scan_eval, SsmParams};
use vmunet_core::tensor::TensorBase;
use vmunet_core::{Rng, Tape, Tensor};

fn tensor_from(values: &[f64], shape: Vec<usize>) -> Tensor {
    TensorBase::new(shape, values.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merge_of_expand_is_exactly_four_x(
        h in 1usize..12,
        w in 1usize..12,
        d in 1usize..5,
        seed in 0u64..1000,
    ) {
        let mut rng = Rng::seed_from(seed);
        let x = Tensor::uniform(vec![h, w, d], -3.0, 3.0, &mut rng);
        let maps = ScanMaps::new(h, w);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let seqs = scan_expand(&mut tape, xv, &maps).unwrap();
        let merged = scan_merge(&mut tape, seqs, &maps, d).unwrap();
        for (m, v) in tape.value(merged).data().iter().zip(x.data()) {
            prop_assert_eq!(*m, 4.0 * v);
        }
    }

    #[test]
    fn index_maps_are_permutations(h in 1usize..20, w in 1usize..20) {
        let maps = ScanMaps::new(h, w);
        for k in 0..4 {
            let mut seen = vec![false; h * w];
            for &g in maps.maps[k].iter() {
                prop_assert!(!seen[g]);
                seen[g] = true;
            }
            prop_assert!(seen.iter().all(|&s| s));
        }
    }

    #[test]
    fn dsc_follows_from_iou(
        pred in proptest::collection::vec(0u8..2, 1..128),
        gt_seed in 0u64..500,
    ) {
        let mut rng = Rng::seed_from(gt_seed);
        let gt: Vec<u8> = pred.iter().map(|_| u8::from(rng.bernoulli(0.5))).collect();
        let m = metrics(&confusion(&pred, &gt).unwrap());
        prop_assert!((m.dsc - 2.0 * m.miou / (1.0 + m.miou)).abs() < 1e-12);
    }

    #[test]
    fn flipping_both_masks_swaps_sen_spe(
        seed in 0u64..500,
        n in 1usize..100,
    ) {
        let mut rng = Rng::seed_from(seed);
        let pred: Vec<u8> = (0..n).map(|_| u8::from(rng.bernoulli(0.3))).collect();
        let gt: Vec<u8> = (0..n).map(|_| u8::from(rng.bernoulli(0.3))).collect();
        let flip = |m: &[u8]| m.iter().map(|&v| 1 - v).collect::<Vec<u8>>();
        let a = metrics(&confusion(&pred, &gt).unwrap());
        let b = metrics(&confusion(&flip(&pred), &flip(&gt)).unwrap());
        prop_assert_eq!(a.sen, b.spe);
        prop_assert_eq!(a.spe, b.sen);
    }

    #[test]
    fn hd95_is_symmetric_and_translation_invariant(
        seed in 0u64..500,
        dr in 0usize..4,
        dc in 0usize..4,
    ) {
        let (h, w) = (16usize, 16usize);
        let mut rng = Rng::seed_from(seed);
        // Small blobs kept away from the border so translation cannot clip.
        let mut a = vec![0u8; h * w];
        let mut b = vec![0u8; h * w];
        for _ in 0..3 {
            a[(2 + rng.below(8)) * w + 2 + rng.below(8)] = 1;
            b[(2 + rng.below(8)) * w + 2 + rng.below(8)] = 1;
        }
        let d_ab = hd95(&a, &b, h, w, 1.0).unwrap();
        let d_ba = hd95(&b, &a, h, w, 1.0).unwrap();
        prop_assert_eq!(d_ab, d_ba);

        let translate = |m: &[u8]| {
            let mut out = vec![0u8; h * w];
            for r in 0..h - dr {
                for c in 0..w - dc {
                    out[(r + dr) * w + c + dc] = m[r * w + c];
                }
            }
            out
        };
        let d_t = hd95(&translate(&a), &translate(&b), h, w, 1.0).unwrap();
        prop_assert!((d_ab - d_t).abs() < 1e-12);
    }

    #[test]
    fn dice_loss_is_permutation_invariant(
        seed in 0u64..500,
        n in 2usize..64,
    ) {
        let mut rng = Rng::seed_from(seed);
        let z: Vec<f64> = (0..n).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| f64::from(rng.bernoulli(0.5))).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let zp: Vec<f64> = perm.iter().map(|&i| z[i]).collect();
        let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let eval = |z: &[f64], y: &[f64]| {
            let mut tape = Tape::new();
            let zv = tape.constant(tensor_from(z, vec![z.len()]));
            let l = tape.dice_sigmoid(zv, y, 1.0).unwrap();
            tape.value(l).item()
        };
        prop_assert!((eval(&z, &y) - eval(&zp, &yp)).abs() < 1e-12);
    }

    #[test]
    fn combined_loss_is_linear_in_weights(
        seed in 0u64..500,
        l1 in 0.0f64..4.0,
        l2 in 0.0f64..4.0,
    ) {
        let mut rng = Rng::seed_from(seed);
        let n = 12;
        let z: Vec<f64> = (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| f64::from(rng.bernoulli(0.5))).collect();
        let eval = |a: f64, b: f64| {
            let mut tape = Tape::new();
            let zv = tape.constant(tensor_from(&z, vec![n]));
            let w = LossWeights { lambda1: a, lambda2: b, ..Default::default() };
            let l = tape.bcedice(zv, &y, &w).unwrap();
            tape.value(l).item()
        };
        let combined = eval(l1, l2);
        let expected = l1 * eval(1.0, 0.0) + l2 * eval(0.0, 1.0);
        prop_assert!((combined - expected).abs() < 1e-10);
    }

    #[test]
    fn scan_is_causal_under_any_suffix_edit(
        seed in 0u64..300,
        l in 2usize..12,
        cut_frac in 0.1f64..0.9,
    ) {
        let mut rng = Rng::seed_from(seed);
        let d = 1 + rng.below(3);
        let n = 1 + rng.below(3);
        let params = SsmParams::init(d, n, &mut rng);
        let x1 = Tensor::uniform(vec![l, d], -1.0, 1.0, &mut rng);
        let cut = ((l as f64 * cut_frac) as usize).max(1).min(l - 1) * d;
        let mut x2 = x1.clone();
        for i in cut..x2.numel() {
            x2.data_mut()[i] = -x2.data()[i] + 0.7;
        }
        let y1 = s6_scan_eval(&x1, &params, None).unwrap();
        let y2 = s6_scan_eval(&x2, &params, None).unwrap();
        prop_assert_eq!(&y1.data()[..cut], &y2.data()[..cut]);
    }

    #[test]
    fn lti_scan_is_linear(seed in 0u64..300, alpha in -3.0f64..3.0) {
        let mut rng = Rng::seed_from(seed);
        let params = SsmParams::lti(2, 2, 0.35, -1.2, 1.1, 0.8, 0.4);
        let x = Tensor::uniform(vec![6, 2], -1.0, 1.0, &mut rng);
        let xs = x.map(|v| v * alpha);
        let y = s6_scan_eval(&x, &params, None).unwrap();
        let ys = s6_scan_eval(&xs, &params, None).unwrap();
        for (a, b) in ys.data().iter().zip(y.data()) {
            prop_assert!((a - alpha * b).abs() < 1e-11);
        }
    }
}
