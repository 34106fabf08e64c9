//! Dataset plumbing: the sample type, directory loading (paired
//! `<id>.ppm` image / `<id>.pgm` mask files), and the synthetic shape
//! generator used for desk-scale training.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{read_pgm, read_ppm};
use crate::rng::Rng;
use crate::tensor::TensorBase;
use crate::Tensor;

#[derive(Clone, Debug)]
pub struct SegmentationSample {
    /// `[H,W,3]` floats in [0,1].
    pub image: Tensor,
    /// Row-major class ids, length `H*W`.
    pub mask: Vec<u8>,
    pub id: String,
}

impl SegmentationSample {
    pub fn new(image: Tensor, mask: Vec<u8>, id: String, num_classes: usize) -> Result<Self> {
        let (h, w) = match image.shape() {
            [h, w, 3] => (*h, *w),
            s => return Err(Error::Data(format!("sample `{id}`: image shape {s:?}"))),
        };
        if mask.len() != h * w {
            return Err(Error::Data(format!(
                "sample `{id}`: mask has {} pixels, image {h}x{w}",
                mask.len()
            )));
        }
        let limit = mask_classes(num_classes);
        if let Some(&bad) = mask.iter().find(|&&v| v as usize >= limit) {
            return Err(Error::Data(format!(
                "sample `{id}`: mask value {bad} >= {limit}"
            )));
        }
        Ok(SegmentationSample { image, mask, id })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    /// Foreground indicator as floats, for the binary losses.
    pub fn mask_f64(&self) -> Vec<f64> {
        self.mask.iter().map(|&v| f64::from(v != 0)).collect()
    }
}

/// Number of distinct mask values for a network with `num_classes` logits:
/// a single-logit binary head still segments {background, foreground}.
pub fn mask_classes(num_classes: usize) -> usize {
    num_classes.max(2)
}

/// Load `<stem>.ppm` + `<stem>.pgm` pairs, sorted by stem.
pub fn load_dir(dir: &Path, num_classes: usize) -> Result<Vec<SegmentationSample>> {
    let mut stems: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| {
            let p = e.ok()?.path();
            (p.extension()? == "ppm").then(|| p.file_stem()?.to_str().map(String::from))?
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(Error::Data(format!("no .ppm images under {}", dir.display())));
    }
    stems
        .into_iter()
        .map(|stem| {
            let image = read_ppm(&dir.join(format!("{stem}.ppm")))?;
            let mask_path = dir.join(format!("{stem}.pgm"));
            let (mask, mh, mw) = read_pgm(&mask_path).map_err(|e| {
                Error::Data(format!("mask for `{stem}`: {e}"))
            })?;
            if [mh, mw] != image.shape()[..2] {
                return Err(Error::Data(format!(
                    "sample `{stem}`: mask {mh}x{mw} does not match image"
                )));
            }
            SegmentationSample::new(image, mask, stem, num_classes)
        })
        .collect()
}

// ── synthetic dataset ───────────────────────────────────────────────────

/// Distinct bright colors, one per foreground class (cycled past 8).
const PALETTE: [[f64; 3]; 8] = [
    [0.95, 0.35, 0.25],
    [0.30, 0.85, 0.35],
    [0.35, 0.45, 0.95],
    [0.92, 0.85, 0.30],
    [0.85, 0.35, 0.90],
    [0.30, 0.88, 0.85],
    [0.95, 0.60, 0.25],
    [0.70, 0.75, 0.95],
];

#[allow(clippy::too_many_arguments)]
pub fn fill_ellipse(mask: &mut [u8], h: usize, w: usize, cy: f64, cx: f64, ry: f64, rx: f64, class: u8) {
    for r in 0..h {
        for c in 0..w {
            let dy = (r as f64 - cy) / ry;
            let dx = (c as f64 - cx) / rx;
            if dy * dy + dx * dx <= 1.0 {
                mask[r * w + c] = class;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn fill_rect(mask: &mut [u8], h: usize, w: usize, r0: usize, c0: usize, r1: usize, c1: usize, class: u8) {
    for r in r0..=r1.min(h - 1) {
        for c in c0..=c1.min(w - 1) {
            mask[r * w + c] = class;
        }
    }
}

/// Deterministic synthetic segmentation set: dark noisy background, one or
/// two bright shapes per foreground class, mask exactly matching the
/// rendered geometry. No foreground class is left empty.
pub fn synth_dataset(
    n: usize,
    size: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Vec<SegmentationSample>> {
    if size == 0 || !size.is_multiple_of(32) {
        return Err(Error::Data(format!("synth size {size} must be a multiple of 32")));
    }
    let classes = mask_classes(num_classes);
    if classes > 256 {
        return Err(Error::Data(format!("synth supports at most 256 classes, got {classes}")));
    }
    let root = Rng::seed_from(seed);
    (0..n)
        .map(|i| {
            let mut rng = root.fork(i as u64 + 1);
            let (image, mask) = render_sample(size, classes, &mut rng)?;
            SegmentationSample::new(image, mask, format!("synth{i:04}"), num_classes)
        })
        .collect()
}

fn render_sample(size: usize, classes: usize, rng: &mut Rng) -> Result<(Tensor, Vec<u8>)> {
    for _ in 0..64 {
        let mut mask = vec![0u8; size * size];
        for class in 1..classes {
            let shapes = 1 + rng.below(2);
            for _ in 0..shapes {
                let margin = size as f64 / 4.0;
                let cy = rng.uniform(margin, size as f64 - margin);
                let cx = rng.uniform(margin, size as f64 - margin);
                let lo = size as f64 / 5.0;
                let hi = size as f64 / 3.2;
                if rng.bernoulli(0.5) {
                    let ry = rng.uniform(lo, hi);
                    let rx = rng.uniform(lo, hi);
                    fill_ellipse(&mut mask, size, size, cy, cx, ry, rx, class as u8);
                } else {
                    let hh = rng.uniform(lo, hi);
                    let hw = rng.uniform(lo, hi);
                    let r0 = (cy - hh).max(0.0) as usize;
                    let c0 = (cx - hw).max(0.0) as usize;
                    let r1 = (cy + hh) as usize;
                    let c1 = (cx + hw) as usize;
                    fill_rect(&mut mask, size, size, r0, c0, r1, c1, class as u8);
                }
            }
        }
        // Later classes may bury earlier ones; redraw when that happens.
        let all_present = (1..classes).all(|c| mask.iter().any(|&v| v as usize == c));
        if !all_present {
            continue;
        }
        let image = TensorBase::from_fn(vec![size, size, 3], |i| {
            let ch = i % 3;
            let pix = i / 3;
            match mask[pix] {
                0 => rng.uniform(0.05, 0.30),
                c => {
                    let color = PALETTE[(c as usize - 1) % PALETTE.len()][ch];
                    (color * rng.uniform(0.80, 1.0) + rng.uniform(-0.04, 0.04)).clamp(0.0, 1.0)
                }
            }
        });
        return Ok((image, mask));
    }
    Err(Error::Data(format!(
        "could not render {classes} non-empty classes on a {size}x{size} grid"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let a = synth_dataset(4, 32, 2, 9).unwrap();
        let b = synth_dataset(4, 32, 2, 9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.mask, y.mask);
        }
        let c = synth_dataset(4, 32, 2, 10).unwrap();
        assert_ne!(a[0].mask, c[0].mask);
    }

    #[test]
    fn binary_masks_contain_only_zero_and_one() {
        for s in synth_dataset(6, 32, 2, 3).unwrap() {
            assert!(s.mask.iter().all(|&v| v <= 1));
            assert!(s.mask.iter().any(|&v| v == 1));
        }
    }

    #[test]
    fn no_foreground_class_is_empty() {
        for s in synth_dataset(5, 64, 4, 11).unwrap() {
            for c in 1..4u8 {
                assert!(s.mask.contains(&c), "class {c} empty in {}", s.id);
            }
        }
    }

    #[test]
    fn ellipse_area_matches_analytic_within_5_percent() {
        let (h, w) = (64, 64);
        for (ry, rx) in [(8.0, 8.0), (10.0, 8.5), (12.0, 14.0)] {
            let mut mask = vec![0u8; h * w];
            fill_ellipse(&mut mask, h, w, 32.0, 32.0, ry, rx, 1);
            let area = mask.iter().filter(|&&v| v == 1).count() as f64;
            let analytic = std::f64::consts::PI * ry * rx;
            assert!(
                (area - analytic).abs() / analytic <= 0.05,
                "area {area} vs pi*a*b {analytic}"
            );
        }
    }

    #[test]
    fn synth_rejects_bad_size() {
        assert!(synth_dataset(1, 33, 2, 0).is_err());
    }

    #[test]
    fn sample_validation_catches_out_of_range_mask() {
        let img = Tensor::zeros(vec![32, 32, 3]);
        let mask = vec![5u8; 32 * 32];
        assert!(SegmentationSample::new(img, mask, "bad".into(), 2).is_err());
    }
}
