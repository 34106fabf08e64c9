//! Self-contained verification suite: extended-precision discretization
//! oracle, finite-difference gradient checker, brute-force boundary-distance
//! oracle, and the named checks behind the `verify` subcommand.
//!
//! Every oracle here is an independent route to a result the production code
//! computes some other way; none of them call the code paths they judge.

use crate::error::Result;
use crate::loss::LossWeights;
use crate::metrics::hd95;
use crate::net::{Fwd, NetworkConfig, ParamTable, VmUnetBase, VssBlock};
use crate::rng::Rng;
use crate::ss2d::{scan_expand, scan_merge, ScanMaps};
use crate::ssm::{
    discretize_zoh, lti_conv_oracle, phi1_exact, phi1_series, s6_scan, SsmParams,
};
use crate::tape::Var;
use crate::{Tape, Tensor};

// ── double-double arithmetic (~31 significant digits) ───────────────────

#[derive(Clone, Copy, Debug)]
struct Dd {
    hi: f64,
    lo: f64,
}

impl Dd {
    fn from(v: f64) -> Dd {
        Dd { hi: v, lo: 0.0 }
    }

    fn value(self) -> f64 {
        self.hi + self.lo
    }
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

fn two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    let bb = s - a;
    Dd { hi: s, lo: (a - (s - bb)) + (b - bb) }
}

fn two_prod(a: f64, b: f64) -> Dd {
    let p = a * b;
    Dd { hi: p, lo: a.mul_add(b, -p) }
}

fn dd_add(x: Dd, y: Dd) -> Dd {
    let s = two_sum(x.hi, y.hi);
    quick_two_sum(s.hi, s.lo + x.lo + y.lo)
}

fn dd_mul(x: Dd, y: Dd) -> Dd {
    let p = two_prod(x.hi, y.hi);
    quick_two_sum(p.hi, p.lo + x.hi * y.lo + x.lo * y.hi)
}

fn dd_mul_f64(x: Dd, y: f64) -> Dd {
    let p = two_prod(x.hi, y);
    quick_two_sum(p.hi, p.lo + x.lo * y)
}

fn dd_div_f64(x: Dd, y: f64) -> Dd {
    let q1 = x.hi / y;
    let p = two_prod(q1, y);
    let r = dd_add(x, Dd { hi: -p.hi, lo: -p.lo });
    let q2 = (r.hi + r.lo) / y;
    quick_two_sum(q1, q2)
}

/// `(e^u - 1) / u` in double-double precision: Taylor series for |u| <= 0.5,
/// and the doubling identity `phi1(2v) = phi1(v) * (2 + v * phi1(v)) / 2`
/// above. Independent of the production `exp_m1` route.
fn phi1_dd(u: f64) -> Dd {
    if u == 0.0 {
        return Dd::from(1.0);
    }
    if u.abs() <= 0.5 {
        let mut sum = Dd::from(1.0);
        let mut term = Dd::from(1.0);
        for k in 1..64 {
            term = dd_div_f64(dd_mul_f64(term, u), (k + 1) as f64);
            sum = dd_add(sum, term);
            if term.hi.abs() < 1e-40 * sum.hi.abs() {
                break;
            }
        }
        sum
    } else {
        let half = phi1_dd(u / 2.0);
        let e_half_plus_one = dd_add(dd_mul_f64(half, u / 2.0), Dd::from(2.0));
        dd_div_f64(dd_mul(half, e_half_plus_one), 2.0)
    }
}

/// Extended-precision `(e^u - 1) / u`.
pub fn phi1_extended(u: f64) -> f64 {
    phi1_dd(u).value()
}

/// Extended-precision `e^u` via `1 + u * phi1(u)`.
pub fn exp_extended(u: f64) -> f64 {
    dd_add(dd_mul_f64(phi1_dd(u), u), Dd::from(1.0)).value()
}

// ── finite-difference gradient checker ──────────────────────────────────

/// Gradient magnitudes below this are compared on an absolute scale:
/// central differences at step 1e-5 carry ~1e-10..1e-9 of roundoff for the
/// loss magnitudes used here, which would swamp a ratio against a tiny
/// true gradient.
pub const GRAD_DENOM_FLOOR: f64 = 1e-4;

/// Central finite differences against tape gradients.
///
/// `build` traces a scalar loss from leaf vars corresponding to `inputs`.
/// Up to `coords_per_tensor` coordinates per input are probed (deterministic
/// sample). Returns the worst mixed error
/// `|a - n| / max(|a| + |n|, GRAD_DENOM_FLOOR)`.
pub fn grad_check(
    inputs: &[Tensor],
    step: f64,
    coords_per_tensor: usize,
    seed: u64,
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.get(v).expect("tracked leaf").clone())
        .collect();

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = tensors.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let l = build(&mut t, &vs)?;
        Ok(t.value(l).item())
    };

    let mut rng = Rng::seed_from(seed);
    let mut worst = 0.0f64;
    for (ti, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = if n <= coords_per_tensor {
            (0..n).collect()
        } else {
            (0..coords_per_tensor).map(|_| rng.below(n)).collect()
        };
        for j in coords {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[j] -= step;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let a = analytic[ti].data()[j];
            let denom = (a.abs() + numeric.abs()).max(GRAD_DENOM_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

// ── brute-force boundary-distance oracle ────────────────────────────────

/// All-pairs nearest-boundary HD95, written independently of the production
/// row-pruned search (own boundary extraction, own percentile).
pub fn hd95_bruteforce(pred: &[u8], gt: &[u8], h: usize, w: usize, spacing: f64) -> f64 {
    let boundary = |mask: &[u8]| -> Vec<(i64, i64)> {
        let mut points = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if mask[r * w + c] == 0 {
                    continue;
                }
                let neighbors = [
                    (r as i64 - 1, c as i64),
                    (r as i64 + 1, c as i64),
                    (r as i64, c as i64 - 1),
                    (r as i64, c as i64 + 1),
                ];
                let exposed = neighbors.iter().any(|&(nr, nc)| {
                    nr < 0
                        || nc < 0
                        || nr >= h as i64
                        || nc >= w as i64
                        || mask[nr as usize * w + nc as usize] == 0
                });
                if exposed {
                    points.push((r as i64, c as i64));
                }
            }
        }
        points
    };
    let pa = boundary(pred);
    let pb = boundary(gt);
    match (pa.is_empty(), pb.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return f64::INFINITY,
        _ => {}
    }
    let one_way = |from: &[(i64, i64)], to: &[(i64, i64)]| -> Vec<u64> {
        from.iter()
            .map(|&(r, c)| {
                to.iter()
                    .map(|&(tr, tc)| {
                        let dr = (tr - r).unsigned_abs();
                        let dc = (tc - c).unsigned_abs();
                        dr * dr + dc * dc
                    })
                    .min()
                    .unwrap()
            })
            .collect()
    };
    let mut dists: Vec<f64> = one_way(&pa, &pb)
        .into_iter()
        .chain(one_way(&pb, &pa))
        .map(|d2| (d2 as f64).sqrt() * spacing)
        .collect();
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = 0.95 * (dists.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    dists[lo] + (rank - lo as f64) * (dists[hi] - dists[lo])
}

// ── the check suite ─────────────────────────────────────────────────────

/// Test hook: corrupt one computation so the corresponding check must fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Flip the sign of the discretized input matrix before comparison.
    ZohSignFlip,
}

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &'static str, pass: bool, detail: String) -> Check {
    Check { name, pass, detail }
}

/// Max |scan - convolution| over `trials` random time-invariant systems.
pub fn scan_conv_trials(trials: usize, seed: u64) -> f64 {
    let mut rng = Rng::seed_from(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let l = 1 + rng.below(64);
        let delta = rng.uniform(1e-3f64.ln(), 1.5f64.ln()).exp();
        let a = -rng.uniform(0.01, 4.0);
        let b = rng.uniform(-2.0, 2.0);
        let c = rng.uniform(-2.0, 2.0);
        let xs: Vec<f64> = (0..l).map(|_| rng.uniform(-1.0, 1.0)).collect();

        let a_t = Tensor::new(vec![1, 1], vec![a]).unwrap();
        let b_t = Tensor::new(vec![1], vec![b]).unwrap();
        let d_t = Tensor::new(vec![l, 1], vec![delta; l]).unwrap();
        let (a_bar, b_bar) = discretize_zoh(&a_t, &b_t, &d_t).unwrap();
        debug_assert!(a_bar.data()[0].abs() <= 1.0);
        let conv = lti_conv_oracle(&xs, a_bar.data()[0], b_bar.data()[0], c);

        let params = SsmParams::<f64>::lti(1, 1, delta, a, b, c, 0.0);
        let x = Tensor::new(vec![l, 1], xs).unwrap();
        let scan = crate::ssm::s6_scan_eval(&x, &params, None).unwrap();
        let diff = scan
            .data()
            .iter()
            .zip(&conv)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        worst = worst.max(diff);
    }
    worst
}

fn zoh_check(fault: Option<Fault>) -> Check {
    let mut worst = 0.0f64;
    // 160 log-spaced magnitudes across [1e-12, 10], both signs of a.
    for k in 0..160 {
        let mag = 1e-12 * 10f64.powf(13.0 * k as f64 / 159.0);
        for a in [-1.0, 1.0] {
            let a_t = Tensor::new(vec![1, 1], vec![a]).unwrap();
            let b_t = Tensor::new(vec![1], vec![1.0]).unwrap();
            let d_t = Tensor::new(vec![1, 1], vec![mag]).unwrap();
            let (a_bar, b_bar) = discretize_zoh(&a_t, &b_t, &d_t).unwrap();
            let mut got_b = b_bar.data()[0];
            if fault == Some(Fault::ZohSignFlip) {
                got_b = -got_b;
            }
            let u = mag * a;
            let want_a = exp_extended(u);
            let want_b = phi1_extended(u) * mag;
            let rel = |got: f64, want: f64| (got - want).abs() / want.abs().max(f64::MIN_POSITIVE);
            worst = worst.max(rel(a_bar.data()[0], want_a)).max(rel(got_b, want_b));
        }
    }
    check(
        "zoh_extended_precision",
        worst <= 1e-9,
        format!("max rel err {worst:.3e} (tol 1e-9)"),
    )
}

fn zoh_overlap_check() -> Check {
    let mut worst = 0.0f64;
    for k in 0..120 {
        let mag = 1e-9 * 10f64.powf(3.0 * k as f64 / 119.0);
        for u in [mag, -mag] {
            let s = phi1_series(u);
            let e = phi1_exact(u);
            worst = worst.max(((s - e) / e).abs());
        }
    }
    check(
        "zoh_series_overlap",
        worst <= 1e-9,
        format!("max rel err {worst:.3e} over |u| in [1e-9,1e-6]"),
    )
}

fn duality_check() -> Check {
    let worst = scan_conv_trials(1000, 2024);
    check(
        "scan_conv_duality",
        worst <= 1e-9,
        format!("max abs diff {worst:.3e} over 1000 LTI systems (tol 1e-9)"),
    )
}

fn causality_check() -> Check {
    let mut rng = Rng::seed_from(5);
    let mut pass = true;
    for _ in 0..20 {
        let l = 4 + rng.below(12);
        let d = 1 + rng.below(3);
        let n = 1 + rng.below(3);
        let params = SsmParams::<f64>::init(d, n, &mut rng);
        let x1 = Tensor::uniform(vec![l, d], -1.0, 1.0, &mut rng);
        let cut = (1 + rng.below(l - 1)) * d;
        let mut x2 = x1.clone();
        for i in cut..x2.numel() {
            x2.data_mut()[i] += 7.0;
        }
        let y1 = crate::ssm::s6_scan_eval(&x1, &params, None).unwrap();
        let y2 = crate::ssm::s6_scan_eval(&x2, &params, None).unwrap();
        pass &= y1.data()[..cut] == y2.data()[..cut];
    }
    check("scan_causality", pass, "prefix bit-identical under suffix perturbation".into())
}

fn merge_expand_check() -> Check {
    let mut rng = Rng::seed_from(6);
    let mut pass = true;
    let mut detail = String::from("merge(expand(x)) == 4x on 100 random grids");
    for _ in 0..100 {
        let h = 1 + rng.below(16);
        let w = 1 + rng.below(16);
        let d = 1 + rng.below(8);
        let maps = ScanMaps::new(h, w);
        for k in 0..4 {
            let mut seen = vec![false; h * w];
            for &g in maps.maps[k].iter() {
                if seen[g] {
                    pass = false;
                    detail = format!("direction {k} map is not a permutation at {h}x{w}");
                }
                seen[g] = true;
            }
        }
        let x = Tensor::uniform(vec![h, w, d], -2.0, 2.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let seqs = scan_expand(&mut tape, xv, &maps).unwrap();
        let merged = scan_merge(&mut tape, seqs, &maps, d).unwrap();
        let exact = tape
            .value(merged)
            .data()
            .iter()
            .zip(x.data())
            .all(|(m, v)| *m == 4.0 * v);
        if !exact {
            pass = false;
            detail = format!("round trip not exact at {h}x{w}x{d}");
        }
    }
    check("scan_merge_roundtrip", pass, detail)
}

fn sum_of_squares(tape: &mut Tape, y: Var) -> Result<Var> {
    let sq = tape.mul(y, y)?;
    Ok(tape.sum(sq))
}

fn gradcheck_primitives() -> Check {
    let mut rng = Rng::seed_from(7);
    let mut run = || -> Result<f64> {
        let mut worst = 0.0f64;
        // matmul -> bias -> silu -> layer_norm chain.
        let x = Tensor::uniform(vec![3, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(vec![4, 5], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(vec![5], -0.5, 0.5, &mut rng);
        let g = Tensor::uniform(vec![5], 0.5, 1.5, &mut rng);
        let be = Tensor::uniform(vec![5], -0.5, 0.5, &mut rng);
        worst = worst.max(grad_check(
            &[x, w, b, g, be],
            1e-5,
            usize::MAX,
            1,
            &|tape, v| {
                let mm = tape.matmul(v[0], v[1])?;
                let biased = tape.add_bias(mm, v[2])?;
                let act = tape.silu(biased);
                let sp = tape.softplus(act);
                let ln = tape.layer_norm(sp, v[3], v[4], 1e-5)?;
                sum_of_squares(tape, ln)
            },
        )?);
        // Depthwise convolution.
        let img = Tensor::uniform(vec![4, 5, 2], -1.0, 1.0, &mut rng);
        let k = Tensor::uniform(vec![3, 3, 2], -0.6, 0.6, &mut rng);
        worst = worst.max(grad_check(&[img, k], 1e-5, usize::MAX, 2, &|tape, v| {
            let conv = tape.depthwise_conv2d(v[0], v[1])?;
            sum_of_squares(tape, conv)
        })?);
        // Losses on 4x4 grids.
        let mask: Vec<f64> = (0..16).map(|_| f64::from(rng.bernoulli(0.5))).collect();
        let z = Tensor::uniform(vec![16], -2.0, 2.0, &mut rng);
        worst = worst.max(grad_check(std::slice::from_ref(&z), 1e-5, usize::MAX, 3, &|tape, v| {
            tape.bcedice(v[0], &mask, &LossWeights::default())
        })?);
        let labels: Vec<u8> = (0..16).map(|_| rng.below(3) as u8).collect();
        let zk = Tensor::uniform(vec![16, 3], -2.0, 2.0, &mut rng);
        worst = worst.max(grad_check(&[zk], 1e-5, usize::MAX, 4, &|tape, v| {
            tape.cedice(v[0], &labels, &LossWeights::default())
        })?);
        Ok(worst)
    };
    match run() {
        Ok(w) => check(
            "gradcheck_primitives",
            w <= 1e-4,
            format!("max rel err {w:.3e} (tol 1e-4)"),
        ),
        Err(e) => check("gradcheck_primitives", false, e.to_string()),
    }
}

fn gradcheck_scan() -> Check {
    let mut rng = Rng::seed_from(8);
    let (l, d, n) = (8, 4, 4);
    let params = SsmParams::<f64>::init(d, n, &mut rng);
    let x = Tensor::uniform(vec![l, d], -1.0, 1.0, &mut rng);
    let inputs = vec![
        x,
        params.a.clone(),
        params.d_skip.clone(),
        params.w_dt_down.clone(),
        params.w_dt_up.clone(),
        params.dt_bias.clone(),
        params.w_b.clone(),
        params.b_bias.clone(),
        params.w_c.clone(),
        params.c_bias.clone(),
    ];
    let result = grad_check(&inputs, 1e-5, usize::MAX, 9, &|tape, v| {
        let vars = crate::ssm::SsmVars {
            a: v[1],
            d_skip: v[2],
            w_dt_down: v[3],
            w_dt_up: v[4],
            dt_bias: v[5],
            w_b: v[6],
            b_bias: v[7],
            w_c: v[8],
            c_bias: v[9],
        };
        let y = s6_scan(tape, v[0], &vars, None)?;
        sum_of_squares(tape, y)
    });
    match result {
        Ok(w) => check("gradcheck_scan", w <= 1e-4, format!("max rel err {w:.3e} at L=8 D=4 N=4")),
        Err(e) => check("gradcheck_scan", false, e.to_string()),
    }
}

fn gradcheck_ss2d() -> Check {
    let mut rng = Rng::seed_from(9);
    let (h, w, d, n) = (4, 4, 2, 2);
    let params: Vec<SsmParams<f64>> = (0..4).map(|_| SsmParams::init(d, n, &mut rng)).collect();
    let mut inputs = vec![Tensor::uniform(vec![h, w, d], -1.0, 1.0, &mut rng)];
    for p in &params {
        inputs.extend([
            p.a.clone(),
            p.d_skip.clone(),
            p.w_dt_down.clone(),
            p.w_dt_up.clone(),
            p.dt_bias.clone(),
            p.w_b.clone(),
            p.b_bias.clone(),
            p.w_c.clone(),
            p.c_bias.clone(),
        ]);
    }
    let result = grad_check(&inputs, 1e-5, usize::MAX, 10, &|tape, v| {
        let heads: [crate::ssm::SsmVars; 4] = [0, 1, 2, 3].map(|k| {
            let b = 1 + k * 9;
            crate::ssm::SsmVars {
                a: v[b],
                d_skip: v[b + 1],
                w_dt_down: v[b + 2],
                w_dt_up: v[b + 3],
                dt_bias: v[b + 4],
                w_b: v[b + 5],
                b_bias: v[b + 6],
                w_c: v[b + 7],
                c_bias: v[b + 8],
            }
        });
        let y = crate::ss2d::ss2d_forward(tape, v[0], &heads)?;
        sum_of_squares(tape, y)
    });
    match result {
        Ok(worst) => check(
            "gradcheck_ss2d",
            worst <= 1e-4,
            format!("max rel err {worst:.3e} at 4x4 grid"),
        ),
        Err(e) => check("gradcheck_ss2d", false, e.to_string()),
    }
}

fn gradcheck_vss_block() -> Check {
    let cfg = NetworkConfig {
        base_channels: 4,
        state_dim: 2,
        input_size: 32,
        ..Default::default()
    };
    let mut table = ParamTable::new();
    let block = VssBlock::new(&mut table, "blk", &cfg, 4);
    let mut rng = Rng::seed_from(11);
    let values: Vec<Tensor> = table.materialize(&mut rng);
    let mut inputs = vec![Tensor::uniform(vec![4, 4, 4], -1.0, 1.0, &mut rng)];
    inputs.extend(values);
    let result = grad_check(&inputs, 1e-5, 6, 12, &|tape, v| {
        let mut rng = Rng::seed_from(0);
        let mut f = Fwd { tape, params: &v[1..], train: false, dropout_p: 0.0, rng: &mut rng };
        let y = block.apply(&mut f, v[0])?;
        sum_of_squares(tape, y)
    });
    match result {
        Ok(worst) => check(
            "gradcheck_vss_block",
            worst <= 1e-4,
            format!("max rel err {worst:.3e} (sampled coords)"),
        ),
        Err(e) => check("gradcheck_vss_block", false, e.to_string()),
    }
}

fn gradcheck_toy_network() -> Check {
    let cfg = NetworkConfig {
        base_channels: 4,
        encoder_depths: [1, 1, 1, 1],
        decoder_depths: [1, 1, 1, 1],
        state_dim: 2,
        input_size: 32,
        ..Default::default()
    };
    let mut rng = Rng::seed_from(13);
    let model = match VmUnetBase::<f64>::new(cfg, &mut rng) {
        Ok(m) => m,
        Err(e) => return check("gradcheck_toy_network", false, e.to_string()),
    };
    let image = Tensor::uniform(vec![32, 32, 3], 0.0, 1.0, &mut rng);
    let mask: Vec<f64> = (0..32 * 32).map(|_| f64::from(rng.bernoulli(0.4))).collect();
    let inputs: Vec<Tensor> = model.param_values().to_vec();
    let result = grad_check(&inputs, 1e-5, 1, 14, &|tape, v| {
        let mut rng = Rng::seed_from(0);
        let logits = model.forward_with_params(tape, v, &image, false, &mut rng)?;
        let flat = tape.reshape(logits, vec![32 * 32, 1])?;
        tape.bcedice(flat, &mask, &LossWeights::default())
    });
    match result {
        Ok(worst) => check(
            "gradcheck_toy_network",
            worst <= 1e-4,
            format!("max rel err {worst:.3e} (1 coord per tensor)"),
        ),
        Err(e) => check("gradcheck_toy_network", false, e.to_string()),
    }
}

fn hd95_check() -> Check {
    let mut rng = Rng::seed_from(15);
    let mut pass = true;
    let mut detail = String::from("production == brute force on 100 random mask pairs");
    for trial in 0..100 {
        let h = 2 + rng.below(31);
        let w = 2 + rng.below(31);
        let density = rng.uniform(0.05, 0.6);
        let gen = |rng: &mut Rng| -> Vec<u8> {
            (0..h * w).map(|_| u8::from(rng.bernoulli(density))).collect()
        };
        let a = gen(&mut rng);
        let b = gen(&mut rng);
        let fast = hd95(&a, &b, h, w, 1.0).unwrap();
        let slow = hd95_bruteforce(&a, &b, h, w, 1.0);
        let equal = (fast.is_infinite() && slow.is_infinite()) || fast == slow;
        if !equal {
            pass = false;
            detail = format!("trial {trial} ({h}x{w}): fast {fast} vs brute {slow}");
            break;
        }
    }
    check("hd95_bruteforce", pass, detail)
}

fn loss_unit_check() -> Check {
    let mut tape = Tape::new();
    let mut pass = true;
    let mut notes = Vec::new();

    let z = tape.constant(Tensor::zeros(vec![8]));
    let bce = tape
        .bce_with_logits(z, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0], 1e-7)
        .unwrap();
    if (tape.value(bce).item() - 2.0f64.ln()).abs() > 1e-12 {
        pass = false;
        notes.push("bce(0.5) != ln 2".to_string());
    }

    let zk = tape.constant(Tensor::zeros(vec![4, 9]));
    let ce = tape.ce_with_logits(zk, &[0, 4, 7, 8]).unwrap();
    if (tape.value(ce).item() - 9.0f64.ln()).abs() > 1e-12 {
        pass = false;
        notes.push("ce(uniform, K=9) != ln 9".to_string());
    }

    let sharp = tape.constant(Tensor::new(vec![4], vec![60.0, 60.0, -60.0, -60.0]).unwrap());
    let perfect = tape.dice_sigmoid(sharp, &[1.0, 1.0, 0.0, 0.0], 1e-9).unwrap();
    let disjoint = tape.dice_sigmoid(sharp, &[0.0, 0.0, 1.0, 1.0], 1e-9).unwrap();
    if tape.value(perfect).item().abs() > 1e-8 || (tape.value(disjoint).item() - 1.0).abs() > 1e-8 {
        pass = false;
        notes.push("dice perfect/disjoint limits off".to_string());
    }

    // DSC = 2 IoU / (1 + IoU) over random hard masks.
    let mut rng = Rng::seed_from(16);
    for _ in 0..1000 {
        let pred: Vec<u8> = (0..24).map(|_| u8::from(rng.bernoulli(0.5))).collect();
        let gt: Vec<u8> = (0..24).map(|_| u8::from(rng.bernoulli(0.5))).collect();
        let m = crate::metrics::metrics(&crate::metrics::confusion(&pred, &gt).unwrap());
        if (m.dsc - 2.0 * m.miou / (1.0 + m.miou)).abs() > 1e-12 {
            pass = false;
            notes.push("dsc/iou identity violated".to_string());
            break;
        }
    }
    let detail = if notes.is_empty() {
        "bce=ln2, ce=ln9, dice limits, dsc-iou identity".to_string()
    } else {
        notes.join("; ")
    };
    check("loss_unit_values", pass, detail)
}

/// Run every named check; a `fault` makes the targeted check fail (hook for
/// testing that the suite can fail).
pub fn run_suite(fault: Option<Fault>) -> Vec<Check> {
    vec![
        zoh_check(fault),
        zoh_overlap_check(),
        duality_check(),
        causality_check(),
        merge_expand_check(),
        gradcheck_primitives(),
        gradcheck_scan(),
        gradcheck_ss2d(),
        gradcheck_vss_block(),
        gradcheck_toy_network(),
        hd95_check(),
        loss_unit_check(),
    ]
}
