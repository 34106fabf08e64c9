//! Selective state-space kernels: zero-order-hold discretization, the
//! input-dependent sequential scan, and the LTI global-convolution route that
//! doubles as its correctness oracle.
//!
//! The state matrix is diagonal per channel (`[D, N]`), so discretization is
//! elementwise: `a_bar = exp(delta * a)` and
//! `b_bar = (delta * a)^-1 (exp(delta * a) - 1) * delta * b`, with a series
//! fallback near `delta * a = 0`.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::{softplus_inv, Scalar};
use crate::tape::{TapeBase, Var};
use crate::tensor::TensorBase;

/// Threshold below which `phi1` switches to its Taylor series.
pub const PHI1_SERIES_THRESHOLD: f64 = 1e-8;

/// `(e^u - 1) / u` via `exp_m1`; accurate for any non-tiny `u`.
pub fn phi1_exact<S: Scalar>(u: S) -> S {
    u.exp_m1() / u
}

/// Taylor series of `(e^u - 1) / u` around zero.
pub fn phi1_series<S: Scalar>(u: S) -> S {
    let c2 = S::of_f64(0.5);
    let c3 = S::of_f64(1.0 / 6.0);
    let c4 = S::of_f64(1.0 / 24.0);
    S::one() + u * (c2 + u * (c3 + u * c4))
}

/// `(e^u - 1) / u` with the series fallback for small `|u|`.
pub fn phi1<S: Scalar>(u: S) -> S {
    if u.abs().as_f64() < PHI1_SERIES_THRESHOLD {
        phi1_series(u)
    } else {
        phi1_exact(u)
    }
}

/// Derivative of `phi1`: `(e^u (u - 1) + 1) / u^2`, series-stabilized.
fn phi1_prime<S: Scalar>(u: S) -> S {
    if u.abs().as_f64() < 1e-3 {
        // 1/2 + u/3 + u^2/8 + u^3/30 + u^4/144
        let c1 = S::of_f64(0.5);
        let c2 = S::of_f64(1.0 / 3.0);
        let c3 = S::of_f64(1.0 / 8.0);
        let c4 = S::of_f64(1.0 / 30.0);
        let c5 = S::of_f64(1.0 / 144.0);
        c1 + u * (c2 + u * (c3 + u * (c4 + u * c5)))
    } else {
        (u.exp() * (u - S::one()) + S::one()) / (u * u)
    }
}

/// Zero-order-hold discretization of diagonal continuous parameters.
///
/// `a_diag` is `[D,N]`, `delta` is `[L,D]` (strictly positive), and `b` is
/// either `[N]` (shared across steps) or `[L,N]`. Returns `(a_bar, b_bar)`,
/// both `[L,D,N]`.
pub fn discretize_zoh<S: Scalar>(
    a_diag: &TensorBase<S>,
    b: &TensorBase<S>,
    delta: &TensorBase<S>,
) -> Result<(TensorBase<S>, TensorBase<S>)> {
    let (d, n) = match a_diag.shape() {
        [d, n] => (*d, *n),
        s => return Err(Error::shape(format!("discretize_zoh: a must be [D,N], got {s:?}"))),
    };
    let l = match delta.shape() {
        [l, dd] if *dd == d => *l,
        s => {
            return Err(Error::shape(format!(
                "discretize_zoh: delta must be [L,{d}], got {s:?}"
            )))
        }
    };
    let b_per_step = match b.shape() {
        [nn] if *nn == n => false,
        [ll, nn] if *ll == l && *nn == n => true,
        s => {
            return Err(Error::shape(format!(
                "discretize_zoh: b must be [{n}] or [{l},{n}], got {s:?}"
            )))
        }
    };
    if let Some(&bad) = delta.data().iter().find(|&&v| v <= S::zero()) {
        return Err(Error::Numeric(format!(
            "discretize_zoh: delta must be positive, got {bad}"
        )));
    }

    let mut a_bar = vec![S::zero(); l * d * n];
    let mut b_bar = vec![S::zero(); l * d * n];
    for t in 0..l {
        for di in 0..d {
            let dt = delta.data()[t * d + di];
            for ni in 0..n {
                let u = dt * a_diag.data()[di * n + ni];
                let bv = if b_per_step { b.data()[t * n + ni] } else { b.data()[ni] };
                let idx = (t * d + di) * n + ni;
                a_bar[idx] = u.exp();
                b_bar[idx] = phi1(u) * dt * bv;
            }
        }
    }
    Ok((
        TensorBase::new(vec![l, d, n], a_bar)?,
        TensorBase::new(vec![l, d, n], b_bar)?,
    ))
}

/// Structured convolution kernel of a time-invariant scalar system:
/// `(c*b_bar, c*a_bar*b_bar, ..., c*a_bar^(len-1)*b_bar)`.
pub fn lti_kernel<S: Scalar>(len: usize, a_bar: S, b_bar: S, c: S) -> Vec<S> {
    let mut kernel = Vec::with_capacity(len);
    let mut pow = S::one();
    for _ in 0..len {
        kernel.push(c * pow * b_bar);
        pow *= a_bar;
    }
    kernel
}

/// Causal convolution route for a time-invariant scalar system: builds the
/// kernel for the input length and convolves.
pub fn lti_conv_oracle<S: Scalar>(x: &[S], a_bar: S, b_bar: S, c: S) -> Vec<S> {
    let l = x.len();
    let kernel = lti_kernel(l, a_bar, b_bar, c);
    let mut y = vec![S::zero(); l];
    for t in 0..l {
        let mut acc = S::zero();
        for i in 0..=t {
            acc += kernel[i] * x[t - i];
        }
        y[t] = acc;
    }
    y
}

/// Learnable quantities of one selective-scan head over `D` channels with
/// state size `N`. The step size, input, and output projections make the
/// recurrence input-dependent; zeroing their weights (bias-only) reduces the
/// head to a time-invariant system.
#[derive(Clone, Debug)]
pub struct SsmParams<S> {
    /// Diagonal state matrix entries, `[D,N]`; initialized negative.
    pub a: TensorBase<S>,
    /// Per-channel skip coefficient, `[D]`.
    pub d_skip: TensorBase<S>,
    /// Step-size projection, low-rank: `[D,R]` then `[R,D]`, plus bias `[D]`.
    pub w_dt_down: TensorBase<S>,
    pub w_dt_up: TensorBase<S>,
    pub dt_bias: TensorBase<S>,
    /// Input projection `[D,N]` + bias `[N]`.
    pub w_b: TensorBase<S>,
    pub b_bias: TensorBase<S>,
    /// Output projection `[D,N]` + bias `[N]`.
    pub w_c: TensorBase<S>,
    pub c_bias: TensorBase<S>,
}

/// Rank of the low-rank step-size projection for channel count `d`.
pub fn dt_rank(d: usize) -> usize {
    (d / 16).max(1)
}

impl<S: Scalar> SsmParams<S> {
    /// Default initialization: state ramp `a[d][n] = -(n+1)`, unit skip,
    /// fan-in-uniform projections, step-size bias log-uniform in [1e-3, 1e-1].
    pub fn init(d: usize, n: usize, rng: &mut Rng) -> Self {
        let r = dt_rank(d);
        let lim_d = (1.0 / d as f64).sqrt();
        let lim_r = (1.0 / r as f64).sqrt();
        SsmParams {
            a: TensorBase::from_fn(vec![d, n], |i| S::of_f64(-((i % n) as f64 + 1.0))),
            d_skip: TensorBase::ones(vec![d]),
            w_dt_down: TensorBase::uniform(vec![d, r], -lim_d, lim_d, rng),
            w_dt_up: TensorBase::uniform(vec![r, d], -lim_r, lim_r, rng),
            dt_bias: TensorBase::from_fn(vec![d], |_| {
                let dt0 = rng.uniform((1e-3f64).ln(), (1e-1f64).ln()).exp();
                S::of_f64(softplus_inv(dt0))
            }),
            w_b: TensorBase::uniform(vec![d, n], -lim_d, lim_d, rng),
            b_bias: TensorBase::zeros(vec![n]),
            w_c: TensorBase::uniform(vec![d, n], -lim_d, lim_d, rng),
            c_bias: TensorBase::zeros(vec![n]),
        }
    }

    /// Time-invariant parameterization: all input-dependence weights zero,
    /// constants supplied through the biases. `delta` must be positive.
    pub fn lti(d: usize, n: usize, delta: f64, a: f64, b: f64, c: f64, d_skip: f64) -> Self {
        assert!(delta > 0.0, "lti: delta must be positive");
        let r = dt_rank(d);
        SsmParams {
            a: TensorBase::full(vec![d, n], S::of_f64(a)),
            d_skip: TensorBase::full(vec![d], S::of_f64(d_skip)),
            w_dt_down: TensorBase::zeros(vec![d, r]),
            w_dt_up: TensorBase::zeros(vec![r, d]),
            dt_bias: TensorBase::full(vec![d], S::of_f64(softplus_inv(delta))),
            w_b: TensorBase::zeros(vec![d, n]),
            b_bias: TensorBase::full(vec![n], S::of_f64(b)),
            w_c: TensorBase::zeros(vec![d, n]),
            c_bias: TensorBase::full(vec![n], S::of_f64(c)),
        }
    }

    pub fn channels(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn state_dim(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn register(&self, tape: &mut TapeBase<S>, requires_grad: bool) -> SsmVars {
        SsmVars {
            a: tape.leaf(self.a.clone(), requires_grad),
            d_skip: tape.leaf(self.d_skip.clone(), requires_grad),
            w_dt_down: tape.leaf(self.w_dt_down.clone(), requires_grad),
            w_dt_up: tape.leaf(self.w_dt_up.clone(), requires_grad),
            dt_bias: tape.leaf(self.dt_bias.clone(), requires_grad),
            w_b: tape.leaf(self.w_b.clone(), requires_grad),
            b_bias: tape.leaf(self.b_bias.clone(), requires_grad),
            w_c: tape.leaf(self.w_c.clone(), requires_grad),
            c_bias: tape.leaf(self.c_bias.clone(), requires_grad),
        }
    }
}

/// Tape handles for one scan head's parameters.
#[derive(Clone, Copy, Debug)]
pub struct SsmVars {
    pub a: Var,
    pub d_skip: Var,
    pub w_dt_down: Var,
    pub w_dt_up: Var,
    pub dt_bias: Var,
    pub w_b: Var,
    pub b_bias: Var,
    pub w_c: Var,
    pub c_bias: Var,
}

/// Full selective scan of a `[L,D]` sequence: step size, input and output
/// projections computed from `x`, then the sequential recurrence
/// `h_t = a_bar_t h_{t-1} + b_bar_t x_t`, `y_t = c_t h_t + d_skip x_t`.
///
/// `h0` (shape `[D,N]`, default zeros) is treated as a constant.
pub fn s6_scan<S: Scalar>(
    tape: &mut TapeBase<S>,
    x: Var,
    p: &SsmVars,
    h0: Option<TensorBase<S>>,
) -> Result<Var> {
    let dt_low = tape.matmul(x, p.w_dt_down)?;
    let dt_full = tape.matmul(dt_low, p.w_dt_up)?;
    let dt_pre = tape.add_bias(dt_full, p.dt_bias)?;
    let delta = tape.softplus(dt_pre);
    let b_proj = tape.matmul(x, p.w_b)?;
    let b_seq = tape.add_bias(b_proj, p.b_bias)?;
    let c_proj = tape.matmul(x, p.w_c)?;
    let c_seq = tape.add_bias(c_proj, p.c_bias)?;
    selective_scan_core(tape, x, delta, b_seq, c_seq, p.a, p.d_skip, h0)
}

/// Evaluate [`s6_scan`] outside any caller-visible tape.
pub fn s6_scan_eval<S: Scalar>(
    x: &TensorBase<S>,
    params: &SsmParams<S>,
    h0: Option<TensorBase<S>>,
) -> Result<TensorBase<S>> {
    let mut tape = TapeBase::new();
    let xv = tape.constant(x.clone());
    let vars = params.register(&mut tape, false);
    let y = s6_scan(&mut tape, xv, &vars, h0)?;
    Ok(tape.value(y).clone())
}

/// The fused recurrence with analytic backward through the discretization.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan_core<S: Scalar>(
    tape: &mut TapeBase<S>,
    x: Var,
    delta: Var,
    b_seq: Var,
    c_seq: Var,
    a: Var,
    d_skip: Var,
    h0: Option<TensorBase<S>>,
) -> Result<Var> {
    let (l, d) = match tape.shape(x) {
        [l, d] => (*l, *d),
        s => return Err(Error::shape(format!("selective_scan: x must be [L,D], got {s:?}"))),
    };
    if l == 0 {
        return Err(Error::shape("selective_scan: empty sequence"));
    }
    let n = match tape.shape(b_seq) {
        [ll, n] if *ll == l => *n,
        s => {
            return Err(Error::shape(format!(
                "selective_scan: b must be [{l},N], got {s:?}"
            )))
        }
    };
    for (name, var, want) in [
        ("delta", delta, vec![l, d]),
        ("c", c_seq, vec![l, n]),
        ("a", a, vec![d, n]),
        ("d_skip", d_skip, vec![d]),
    ] {
        if tape.shape(var) != want.as_slice() {
            return Err(Error::shape(format!(
                "selective_scan: {name} must be {want:?}, got {:?}",
                tape.shape(var)
            )));
        }
    }
    let h0 = match h0 {
        Some(t) => {
            if t.shape() != [d, n] {
                return Err(Error::shape(format!(
                    "selective_scan: h0 must be [{d},{n}], got {:?}",
                    t.shape()
                )));
            }
            t
        }
        None => TensorBase::zeros(vec![d, n]),
    };

    let vx = tape.value(x).clone();
    let vdt = tape.value(delta).clone();
    let vb = tape.value(b_seq).clone();
    let vc = tape.value(c_seq).clone();
    let va = tape.value(a).clone();
    let vd = tape.value(d_skip).clone();
    debug_assert!(
        vdt.data().iter().all(|&v| v > S::zero()),
        "selective_scan: delta must be positive"
    );

    // Forward, storing every hidden state for the backward sweep.
    let mut h_all = vec![S::zero(); l * d * n];
    let mut y = vec![S::zero(); l * d];
    for t in 0..l {
        for di in 0..d {
            let dt = vdt.data()[t * d + di];
            let xt = vx.data()[t * d + di];
            let mut acc = S::zero();
            for ni in 0..n {
                let u = dt * va.data()[di * n + ni];
                let a_bar = u.exp();
                let b_bar = phi1(u) * dt * vb.data()[t * n + ni];
                let h_prev = if t > 0 {
                    h_all[((t - 1) * d + di) * n + ni]
                } else {
                    h0.data()[di * n + ni]
                };
                let h = a_bar * h_prev + b_bar * xt;
                h_all[(t * d + di) * n + ni] = h;
                acc += vc.data()[t * n + ni] * h;
            }
            y[t * d + di] = acc + vd.data()[di] * xt;
        }
    }

    let req = [x, delta, b_seq, c_seq, a, d_skip]
        .iter()
        .any(|&v| tape.value_requires(v));
    let out = TensorBase::new(vec![l, d], y)?;
    Ok(tape.push_op(out, req, || {
        Box::new(move |g| {
            let gd = g.data();
            let mut dx = vec![S::zero(); l * d];
            let mut ddt = vec![S::zero(); l * d];
            let mut db = vec![S::zero(); l * n];
            let mut dc = vec![S::zero(); l * n];
            let mut da = vec![S::zero(); d * n];
            let mut dd = vec![S::zero(); d];
            let mut dh = vec![S::zero(); d * n];
            for t in (0..l).rev() {
                for di in 0..d {
                    let gy = gd[t * d + di];
                    let xt = vx.data()[t * d + di];
                    dd[di] += gy * xt;
                    dx[t * d + di] += gy * vd.data()[di];
                    for ni in 0..n {
                        dh[di * n + ni] += gy * vc.data()[t * n + ni];
                        dc[t * n + ni] += gy * h_all[(t * d + di) * n + ni];
                    }
                }
                for di in 0..d {
                    let dt = vdt.data()[t * d + di];
                    let xt = vx.data()[t * d + di];
                    for ni in 0..n {
                        let av = va.data()[di * n + ni];
                        let bv = vb.data()[t * n + ni];
                        let u = dt * av;
                        let eu = u.exp();
                        let p1 = phi1(u);
                        let p1p = phi1_prime(u);
                        let b_bar = p1 * dt * bv;
                        let h_prev = if t > 0 {
                            h_all[((t - 1) * d + di) * n + ni]
                        } else {
                            h0.data()[di * n + ni]
                        };
                        let ghe = dh[di * n + ni];
                        let d_abar = ghe * h_prev;
                        let d_bbar = ghe * xt;
                        dx[t * d + di] += ghe * b_bar;
                        ddt[t * d + di] +=
                            d_abar * av * eu + d_bbar * (p1p * av * dt + p1) * bv;
                        da[di * n + ni] += d_abar * dt * eu + d_bbar * p1p * dt * dt * bv;
                        db[t * n + ni] += d_bbar * p1 * dt;
                        dh[di * n + ni] = ghe * eu;
                    }
                }
            }
            vec![
                (x, TensorBase::new(vec![l, d], dx).unwrap()),
                (delta, TensorBase::new(vec![l, d], ddt).unwrap()),
                (b_seq, TensorBase::new(vec![l, n], db).unwrap()),
                (c_seq, TensorBase::new(vec![l, n], dc).unwrap()),
                (a, TensorBase::new(vec![d, n], da).unwrap()),
                (d_skip, TensorBase::new(vec![d], dd).unwrap()),
            ]
        })
    }))
}
