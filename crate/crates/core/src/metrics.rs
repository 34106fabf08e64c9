//! Evaluation metrics over hard masks: confusion-based scores, per-class
//! Dice, and the 95th-percentile symmetric boundary distance.
//!
//! Binary protocol notes: `miou` is the foreground IoU `TP/(TP+FP+FN)` (the
//! skin-lesion comparison convention, where "mean" is a misnomer); the
//! two-class mean is also reported as `miou_twoclass`.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionStats {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionStats {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Associative merge for folds over a dataset.
    pub fn merge(self, other: ConfusionStats) -> ConfusionStats {
        ConfusionStats {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            tn: self.tn + other.tn,
            fn_: self.fn_ + other.fn_,
        }
    }
}

/// Pixel counts of a binary prediction against ground truth (values in {0,1}).
pub fn confusion(pred: &[u8], gt: &[u8]) -> Result<ConfusionStats> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "confusion: prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if let Some(&bad) = pred.iter().chain(gt).find(|&&v| v > 1) {
        return Err(Error::Data(format!("confusion: mask value {bad} not in {{0,1}}")));
    }
    let mut s = ConfusionStats::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (1, 1) => s.tp += 1,
            (1, 0) => s.fp += 1,
            (0, 0) => s.tn += 1,
            _ => s.fn_ += 1,
        }
    }
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub miou: f64,
    pub dsc: f64,
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    pub miou_twoclass: f64,
}

/// Empty-region convention: a ratio with zero denominator is 1 when the
/// region is empty in both masks, 0 otherwise.
fn ratio(num: u64, den: u64, both_empty: bool) -> f64 {
    if den > 0 {
        num as f64 / den as f64
    } else if both_empty {
        1.0
    } else {
        0.0
    }
}

pub fn metrics(s: &ConfusionStats) -> Metrics {
    let fg_empty_both = s.tp + s.fn_ == 0 && s.tp + s.fp == 0;
    let bg_empty_both = s.tn + s.fp == 0 && s.tn + s.fn_ == 0;
    let fg_iou = ratio(s.tp, s.tp + s.fp + s.fn_, fg_empty_both);
    let bg_iou = ratio(s.tn, s.tn + s.fn_ + s.fp, bg_empty_both);
    Metrics {
        miou: fg_iou,
        dsc: ratio(2 * s.tp, 2 * s.tp + s.fp + s.fn_, fg_empty_both),
        acc: ratio(s.tp + s.tn, s.total(), true),
        sen: ratio(s.tp, s.tp + s.fn_, fg_empty_both),
        spe: ratio(s.tn, s.tn + s.fp, bg_empty_both),
        miou_twoclass: 0.5 * (fg_iou + bg_iou),
    }
}

/// Hard Dice per class over class-id maps. A class absent from both maps
/// scores 1 by convention.
pub fn dsc_per_class(pred: &[u8], gt: &[u8], k: usize) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "dsc_per_class: prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if let Some(&bad) = pred.iter().chain(gt).find(|&&v| v as usize >= k) {
        return Err(Error::Data(format!("dsc_per_class: class id {bad} out of range [0,{k})")));
    }
    let mut inter = vec![0u64; k];
    let mut pc = vec![0u64; k];
    let mut gc = vec![0u64; k];
    for (&p, &g) in pred.iter().zip(gt) {
        pc[p as usize] += 1;
        gc[g as usize] += 1;
        if p == g {
            inter[p as usize] += 1;
        }
    }
    Ok((0..k)
        .map(|c| ratio(2 * inter[c], pc[c] + gc[c], true))
        .collect())
}

// ── 95th-percentile Hausdorff distance ──────────────────────────────────

/// Mask pixels with at least one 4-neighbor outside the mask (out-of-image
/// counts as outside).
pub fn boundary_pixels(mask: &[u8], h: usize, w: usize) -> Vec<(i64, i64)> {
    let at = |r: i64, c: i64| -> bool {
        r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && mask[r as usize * w + c as usize] != 0
    };
    let mut out = Vec::new();
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            if at(r, c)
                && (!at(r - 1, c) || !at(r + 1, c) || !at(r, c - 1) || !at(r, c + 1))
            {
                out.push((r, c));
            }
        }
    }
    out
}

/// Exact squared distance from each point of `from` to its nearest point of
/// `to`, pruned by row distance. `to` must be non-empty.
fn nearest_sq_dists(from: &[(i64, i64)], to: &[(i64, i64)]) -> Vec<u64> {
    // Group target points by row (they arrive row-major sorted).
    let mut rows: Vec<(i64, Vec<i64>)> = Vec::new();
    for &(r, c) in to {
        match rows.last_mut() {
            Some((row, cols)) if *row == r => cols.push(c),
            _ => rows.push((r, vec![c])),
        }
    }
    from.iter()
        .map(|&(pr, pc)| {
            let mut best = u64::MAX;
            // Visit target rows outward from pr; stop once the row gap alone
            // exceeds the best squared distance found.
            let start = rows.partition_point(|(r, _)| *r < pr);
            let (mut lo, mut hi) = (start as i64 - 1, start);
            loop {
                let down = (hi < rows.len()).then(|| (rows[hi].0 - pr).unsigned_abs());
                let up = (lo >= 0).then(|| (rows[lo as usize].0 - pr).unsigned_abs());
                let (idx, gap) = match (down, up) {
                    (None, None) => break,
                    (Some(d), None) => (hi, d),
                    (None, Some(u)) => (lo as usize, u),
                    (Some(d), Some(u)) => {
                        if d <= u {
                            (hi, d)
                        } else {
                            (lo as usize, u)
                        }
                    }
                };
                if gap * gap >= best {
                    break;
                }
                let (row, cols) = &rows[idx];
                let dr = (row - pr).unsigned_abs();
                for &c in cols {
                    let dc = (c - pc).unsigned_abs();
                    best = best.min(dr * dr + dc * dc);
                }
                if idx == hi {
                    hi += 1;
                } else {
                    lo -= 1;
                }
            }
            best
        })
        .collect()
}

/// Linear-interpolation percentile of a sorted sample, `q` in [0, 1].
pub fn percentile_linear(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// 95th percentile of the symmetric set of boundary-to-boundary nearest
/// distances. Both masks empty -> 0; exactly one empty -> +inf.
pub fn hd95(pred: &[u8], gt: &[u8], h: usize, w: usize, spacing: f64) -> Result<f64> {
    if pred.len() != h * w || gt.len() != h * w {
        return Err(Error::shape(format!(
            "hd95: masks must have {}x{} = {} pixels, got {} and {}",
            h,
            w,
            h * w,
            pred.len(),
            gt.len()
        )));
    }
    let pb = boundary_pixels(pred, h, w);
    let gb = boundary_pixels(gt, h, w);
    match (pb.is_empty(), gb.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(f64::INFINITY),
        _ => {}
    }
    let mut dists: Vec<f64> = nearest_sq_dists(&pb, &gb)
        .into_iter()
        .chain(nearest_sq_dists(&gb, &pb))
        .map(|d2| (d2 as f64).sqrt() * spacing)
        .collect();
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(percentile_linear(&dists, 0.95))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn perfect_prediction_scores_ones() {
        let m = [0u8, 1, 1, 0, 1, 0];
        let s = confusion(&m, &m).unwrap();
        let r = metrics(&s);
        assert_eq!(
            (r.miou, r.dsc, r.acc, r.sen, r.spe, r.miou_twoclass),
            (1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn hand_counted_confusion_case() {
        // TP=2, FP=1, FN=1, TN=12 over 16 pixels.
        let mut pred = vec![0u8; 16];
        let mut gt = vec![0u8; 16];
        pred[0] = 1;
        gt[0] = 1;
        pred[1] = 1;
        gt[1] = 1;
        pred[2] = 1; // FP
        gt[3] = 1; // FN
        let s = confusion(&pred, &gt).unwrap();
        assert_eq!((s.tp, s.fp, s.fn_, s.tn), (2, 1, 1, 12));
        let r = metrics(&s);
        assert_eq!(r.miou, 0.5);
        assert!((r.dsc - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.acc, 14.0 / 16.0);
        assert!((r.sen - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.spe - 12.0 / 13.0).abs() < 1e-15);
    }

    #[test]
    fn dsc_is_determined_by_iou() {
        let mut rng = Rng::seed_from(17);
        for _ in 0..200 {
            let n = 32;
            let pred: Vec<u8> = (0..n).map(|_| u8::from(rng.bernoulli(0.4))).collect();
            let gt: Vec<u8> = (0..n).map(|_| u8::from(rng.bernoulli(0.4))).collect();
            let r = metrics(&confusion(&pred, &gt).unwrap());
            let expected = 2.0 * r.miou / (1.0 + r.miou);
            assert!((r.dsc - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn flipping_predictions_swaps_roles() {
        let mut rng = Rng::seed_from(23);
        let n = 64;
        let pred: Vec<u8> = (0..n).map(|_| u8::from(rng.bernoulli(0.3))).collect();
        let gt: Vec<u8> = (0..n).map(|_| u8::from(rng.bernoulli(0.3))).collect();
        let flip = |m: &[u8]| m.iter().map(|&v| 1 - v).collect::<Vec<u8>>();
        let s = confusion(&pred, &gt).unwrap();
        let f = confusion(&flip(&pred), &flip(&gt)).unwrap();
        assert_eq!((s.tp, s.fp, s.tn, s.fn_), (f.tn, f.fn_, f.tp, f.fp));
        let (rm, fm) = (metrics(&s), metrics(&f));
        assert_eq!(rm.sen, fm.spe);
        assert_eq!(rm.spe, fm.sen);
    }

    #[test]
    fn confusion_rejects_mismatch_and_bad_values() {
        assert!(confusion(&[0, 1], &[0]).is_err());
        assert!(confusion(&[0, 2], &[0, 1]).is_err());
    }

    #[test]
    fn per_class_dsc_cases() {
        let pred = [0u8, 1, 2, 2];
        assert_eq!(dsc_per_class(&pred, &pred, 3).unwrap(), vec![1.0, 1.0, 1.0]);
        // Class absent from both scores 1.
        let a = [0u8, 0, 1, 1];
        let b = [0u8, 1, 1, 1];
        let d = dsc_per_class(&a, &b, 4).unwrap();
        // class0: pred 2, gt 1, inter 1 -> 2/3; class1: pred 2, gt 3, inter 2 -> 4/5.
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((d[1] - 0.8).abs() < 1e-15);
        assert_eq!(d[2], 1.0);
        assert_eq!(d[3], 1.0);
    }

    #[test]
    fn hd95_identical_masks_is_zero() {
        let mut m = vec![0u8; 64];
        for r in 2..5 {
            for c in 3..6 {
                m[r * 8 + c] = 1;
            }
        }
        assert_eq!(hd95(&m, &m, 8, 8, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn hd95_two_single_pixels() {
        let mut a = vec![0u8; 36];
        let mut b = vec![0u8; 36];
        a[0] = 1; // (0,0)
        b[3 * 6 + 4] = 1; // (3,4), distance 5
        assert_eq!(hd95(&a, &b, 6, 6, 1.0).unwrap(), 5.0);
        // Spacing scales distances.
        assert_eq!(hd95(&a, &b, 6, 6, 2.5).unwrap(), 12.5);
    }

    #[test]
    fn hd95_empty_conventions() {
        let e = vec![0u8; 16];
        let mut m = vec![0u8; 16];
        m[5] = 1;
        assert_eq!(hd95(&e, &e, 4, 4, 1.0).unwrap(), 0.0);
        assert!(hd95(&e, &m, 4, 4, 1.0).unwrap().is_infinite());
        assert!(hd95(&m, &e, 4, 4, 1.0).unwrap().is_infinite());
    }

    #[test]
    fn boundary_uses_four_connectivity() {
        // 3x3 solid block inside 5x5: center pixel is interior.
        let mut m = vec![0u8; 25];
        for r in 1..4 {
            for c in 1..4 {
                m[r * 5 + c] = 1;
            }
        }
        let b = boundary_pixels(&m, 5, 5);
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(2, 2)));
    }

    #[test]
    fn percentile_interpolates_linearly() {
        let d = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(percentile_linear(&d, 0.0), 0.0);
        assert_eq!(percentile_linear(&d, 1.0), 3.0);
        assert_eq!(percentile_linear(&d, 0.5), 1.5);
        assert!((percentile_linear(&d, 0.95) - 2.85).abs() < 1e-15);
    }
}
