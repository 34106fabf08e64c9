//! 2D selective scan: unfold a feature grid along four corner-to-corner
//! traversals, run an independent selective scan per direction, and
//! scatter-sum the results back onto the grid.
//!
//! Direction semantics are {row-major, column-major} x {forward, reversed}:
//! directions 2 and 3 (0-based) are exact reversals of directions 0 and 1.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::ssm::{s6_scan, SsmVars};
use crate::tape::{TapeBase, Var};

pub const NUM_DIRECTIONS: usize = 4;

/// For each direction, `maps[k][p]` is the flat grid index (`row * w + col`)
/// visited at sequence position `p`. Each map is a permutation of the grid.
#[derive(Clone, Debug)]
pub struct ScanMaps {
    pub h: usize,
    pub w: usize,
    pub maps: [Arc<Vec<usize>>; NUM_DIRECTIONS],
}

impl ScanMaps {
    pub fn new(h: usize, w: usize) -> Self {
        let l = h * w;
        let row_major: Vec<usize> = (0..l).collect();
        let col_major: Vec<usize> = (0..l).map(|p| (p % h) * w + p / h).collect();
        let row_rev: Vec<usize> = row_major.iter().rev().copied().collect();
        let col_rev: Vec<usize> = col_major.iter().rev().copied().collect();
        ScanMaps {
            h,
            w,
            maps: [
                Arc::new(row_major),
                Arc::new(col_major),
                Arc::new(row_rev),
                Arc::new(col_rev),
            ],
        }
    }

    /// Inverse permutation: grid index -> sequence position.
    pub fn inverse(&self, dir: usize) -> Vec<usize> {
        let mut inv = vec![0usize; self.h * self.w];
        for (p, &g) in self.maps[dir].iter().enumerate() {
            inv[g] = p;
        }
        inv
    }
}

fn grid_dims<S: Scalar>(tape: &TapeBase<S>, x: Var) -> Result<(usize, usize, usize)> {
    match tape.shape(x) {
        [h, w, d] => Ok((*h, *w, *d)),
        s => Err(Error::shape(format!("ss2d: expected [H,W,D] grid, got {s:?}"))),
    }
}

/// Unfold a `[H,W,D]` grid into four `[H*W, D]` directional sequences.
pub fn scan_expand<S: Scalar>(
    tape: &mut TapeBase<S>,
    x: Var,
    maps: &ScanMaps,
) -> Result<[Var; NUM_DIRECTIONS]> {
    let (h, w, d) = grid_dims(tape, x)?;
    if h != maps.h || w != maps.w {
        return Err(Error::shape(format!(
            "ss2d: maps built for {}x{} used on {h}x{w}",
            maps.h, maps.w
        )));
    }
    let l = h * w;
    let mut out = [x; NUM_DIRECTIONS];
    for (k, slot) in out.iter_mut().enumerate() {
        let map = &maps.maps[k];
        let mut idx = Vec::with_capacity(l * d);
        for p in 0..l {
            let base = map[p] * d;
            for c in 0..d {
                idx.push(base + c);
            }
        }
        *slot = tape.gather(x, vec![l, d], Arc::new(idx))?;
    }
    Ok(out)
}

/// Scatter four `[H*W, D]` sequences back to their grid positions and sum.
pub fn scan_merge<S: Scalar>(
    tape: &mut TapeBase<S>,
    seqs: [Var; NUM_DIRECTIONS],
    maps: &ScanMaps,
    d: usize,
) -> Result<Var> {
    let l = maps.h * maps.w;
    for (k, &s) in seqs.iter().enumerate() {
        if tape.shape(s) != [l, d] {
            return Err(Error::shape(format!(
                "ss2d merge: direction {k} has shape {:?}, expected [{l},{d}]",
                tape.shape(s)
            )));
        }
    }
    let mut acc: Option<Var> = None;
    for (k, &s) in seqs.iter().enumerate() {
        let inv = maps.inverse(k);
        let mut idx = Vec::with_capacity(l * d);
        for &seq_pos in &inv {
            let base = seq_pos * d;
            for c in 0..d {
                idx.push(base + c);
            }
        }
        let grid = tape.gather(s, vec![maps.h, maps.w, d], Arc::new(idx))?;
        acc = Some(match acc {
            None => grid,
            Some(a) => tape.add(a, grid)?,
        });
    }
    Ok(acc.expect("four directions"))
}

/// Expand -> per-direction selective scan -> merge. Output shape equals the
/// input shape.
pub fn ss2d_forward<S: Scalar>(
    tape: &mut TapeBase<S>,
    x: Var,
    params: &[SsmVars; NUM_DIRECTIONS],
) -> Result<Var> {
    let (h, w, d) = grid_dims(tape, x)?;
    let maps = ScanMaps::new(h, w);
    let seqs = scan_expand(tape, x, &maps)?;
    let mut scanned = seqs;
    for k in 0..NUM_DIRECTIONS {
        scanned[k] = s6_scan(tape, seqs[k], &params[k], None)?;
    }
    scan_merge(tape, scanned, &maps, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::ssm::SsmParams;
    use crate::tensor::TensorBase;

    type Tensor = TensorBase<f64>;
    type Tape = TapeBase<f64>;

    fn expand_values(x: &Tensor) -> [Vec<f64>; 4] {
        let (h, w) = (x.shape()[0], x.shape()[1]);
        let maps = ScanMaps::new(h, w);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let seqs = scan_expand(&mut tape, xv, &maps).unwrap();
        [0, 1, 2, 3].map(|k| tape.value(seqs[k]).data().to_vec())
    }

    #[test]
    fn expand_two_by_two() {
        let x = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let [d1, d2, d3, d4] = expand_values(&x);
        assert_eq!(d1, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(d2, vec![1.0, 3.0, 2.0, 4.0]);
        assert_eq!(d3, vec![4.0, 3.0, 2.0, 1.0]);
        assert_eq!(d4, vec![4.0, 2.0, 3.0, 1.0]);
    }

    #[test]
    fn expand_singleton() {
        let x = Tensor::new(vec![1, 1, 1], vec![7.0]).unwrap();
        for d in expand_values(&x) {
            assert_eq!(d, vec![7.0]);
        }
    }

    #[test]
    fn expand_single_row() {
        let x = Tensor::new(vec![1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let [d1, d2, d3, d4] = expand_values(&x);
        assert_eq!(d1, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(d2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(d3, vec![4.0, 3.0, 2.0, 1.0]);
        assert_eq!(d4, vec![4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn maps_are_permutations_and_reversals() {
        for (h, w) in [(1, 1), (2, 3), (7, 5), (16, 16)] {
            let maps = ScanMaps::new(h, w);
            let l = h * w;
            for k in 0..4 {
                let mut seen = vec![false; l];
                for &g in maps.maps[k].iter() {
                    assert!(!seen[g], "duplicate grid index {g}");
                    seen[g] = true;
                }
            }
            for p in 0..l {
                assert_eq!(maps.maps[2][p], maps.maps[0][l - 1 - p]);
                assert_eq!(maps.maps[3][p], maps.maps[1][l - 1 - p]);
            }
        }
    }

    #[test]
    fn merge_of_expand_is_four_x() {
        let mut rng = Rng::seed_from(4);
        for (h, w, d) in [(1, 1, 1), (2, 3, 2), (5, 4, 3)] {
            let x = Tensor::uniform(vec![h, w, d], -2.0, 2.0, &mut rng);
            let maps = ScanMaps::new(h, w);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let seqs = scan_expand(&mut tape, xv, &maps).unwrap();
            let merged = scan_merge(&mut tape, seqs, &maps, d).unwrap();
            for (m, v) in tape.value(merged).data().iter().zip(x.data()) {
                assert_eq!(*m, 4.0 * v);
            }
        }
    }

    #[test]
    fn merge_single_branch_recovers_input() {
        let mut rng = Rng::seed_from(9);
        let (h, w, d) = (3, 4, 2);
        let x = Tensor::uniform(vec![h, w, d], -1.0, 1.0, &mut rng);
        let maps = ScanMaps::new(h, w);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let seqs = scan_expand(&mut tape, xv, &maps).unwrap();
        let zero = tape.constant(Tensor::zeros(vec![h * w, d]));
        for keep in 0..4 {
            let mut branches = [zero; 4];
            branches[keep] = seqs[keep];
            let merged = scan_merge(&mut tape, branches, &maps, d).unwrap();
            assert_eq!(tape.value(merged).data(), x.data(), "direction {keep}");
        }
    }

    #[test]
    fn merge_is_linear_in_branches() {
        let mut rng = Rng::seed_from(12);
        let (h, w, d) = (4, 3, 2);
        let x = Tensor::uniform(vec![h, w, d], -1.0, 1.0, &mut rng);
        let consts = [0.5, -1.5, 2.0, 3.25];
        let maps = ScanMaps::new(h, w);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let seqs = scan_expand(&mut tape, xv, &maps).unwrap();
        let mut scaled = seqs;
        for k in 0..4 {
            scaled[k] = tape.scale(seqs[k], consts[k]);
        }
        let merged = scan_merge(&mut tape, scaled, &maps, d).unwrap();
        let total: f64 = consts.iter().sum();
        for (m, v) in tape.value(merged).data().iter().zip(x.data()) {
            assert!((m - total * v).abs() < 1e-12);
        }
    }

    fn ss2d_eval(x: &Tensor, params: &[SsmParams<f64>; 4]) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = [0, 1, 2, 3].map(|k| params[k].register(&mut tape, false));
        let y = ss2d_forward(&mut tape, xv, &vars).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn ss2d_zero_input_zero_output() {
        let mut rng = Rng::seed_from(2);
        let params = [0; 4].map(|_| SsmParams::<f64>::init(3, 2, &mut rng));
        let x = Tensor::zeros(vec![4, 4, 3]);
        let y = ss2d_eval(&x, &params);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ss2d_memoryless_mode_is_four_x() {
        // a very negative underflows a_bar = exp(delta * a) to exactly 0;
        // b and c chosen so c * b_bar = 1, no skip.
        let delta = 1.0;
        let a = -800.0;
        let b_bar_target = 1.0; // phi1(-800) = 1/800, so b = 800 gives b_bar = 1
        let params = [0; 4].map(|_| SsmParams::<f64>::lti(2, 1, delta, a, 800.0 * b_bar_target, 1.0, 0.0));
        let mut rng = Rng::seed_from(5);
        let x = Tensor::uniform(vec![3, 5, 2], -1.0, 1.0, &mut rng);
        let y = ss2d_eval(&x, &params);
        for (a, v) in y.data().iter().zip(x.data()) {
            assert!((a - 4.0 * v).abs() < 1e-9, "{a} vs {}", 4.0 * v);
        }
    }

    #[test]
    fn ss2d_preserves_shape() {
        let mut rng = Rng::seed_from(8);
        for (h, w) in [(1, 1), (2, 3), (7, 5)] {
            let params = [0; 4].map(|_| SsmParams::<f64>::init(2, 2, &mut rng));
            let x = Tensor::uniform(vec![h, w, 2], -1.0, 1.0, &mut rng);
            let y = ss2d_eval(&x, &params);
            assert_eq!(y.shape(), &[h, w, 2]);
        }
    }

    #[test]
    fn ss2d_commutes_with_double_flip_under_direction_swap() {
        let mut rng = Rng::seed_from(14);
        let params = [0; 4].map(|_| SsmParams::<f64>::init(2, 2, &mut rng));
        let swapped = [
            params[2].clone(),
            params[3].clone(),
            params[0].clone(),
            params[1].clone(),
        ];
        let (h, w, d) = (4, 5, 2);
        let x = Tensor::uniform(vec![h, w, d], -1.0, 1.0, &mut rng);
        // 180-degree rotation of the grid.
        let flip = |t: &Tensor| {
            TensorBase::from_fn(vec![h, w, d], |i| {
                let c = i % d;
                let g = i / d;
                let (r, col) = (g / w, g % w);
                t.at(&[h - 1 - r, w - 1 - col, c])
            })
        };
        let y_flipped_input = ss2d_eval(&flip(&x), &swapped);
        let y_flipped_output = flip(&ss2d_eval(&x, &params));
        assert!(y_flipped_input.max_abs_diff(&y_flipped_output) <= 1e-12);
    }
}
