//! Reverse-mode automatic differentiation over a dynamic (define-by-run) tape.
//!
//! Every primitive executes eagerly and, when any input participates in
//! gradient flow, records a backward closure. `backward` replays the closures
//! in reverse, accumulating gradients for every tracked leaf. A tape is
//! confined to one logical thread; batch parallelism uses one tape per sample.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::tensor::TensorBase;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Backward rule: maps the output gradient to per-input contributions.
type BackFn<S> = Box<dyn Fn(&TensorBase<S>) -> Vec<(Var, TensorBase<S>)>>;

struct Node<S> {
    value: TensorBase<S>,
    /// Participates in gradient flow (grad leaf, or op over one).
    requires: bool,
    /// Leaf registered with `requires_grad = true`.
    grad_leaf: bool,
}

struct OpRecord<S> {
    out: usize,
    backward: BackFn<S>,
}

pub struct TapeBase<S> {
    nodes: Vec<Node<S>>,
    ops: Vec<OpRecord<S>>,
}

/// Gradient map produced by [`TapeBase::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<TensorBase<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&TensorBase<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<TensorBase<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<S: Scalar> Default for TapeBase<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> TapeBase<S> {
    pub fn new() -> Self {
        TapeBase { nodes: Vec::new(), ops: Vec::new() }
    }

    /// Drop every recorded node and backward rule.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.ops.clear();
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    pub fn value(&self, v: Var) -> &TensorBase<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: TensorBase<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires: requires_grad, grad_leaf: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: TensorBase<S>) -> Var {
        self.leaf(value, false)
    }

    pub(crate) fn value_requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    /// Record an op output; `backward` is only kept when gradients can flow.
    pub(crate) fn push_op(
        &mut self,
        value: TensorBase<S>,
        requires: bool,
        backward: impl FnOnce() -> BackFn<S>,
    ) -> Var {
        debug_assert!(
            value.all_finite(),
            "non-finite value produced by a forward op (shape {:?})",
            value.shape()
        );
        self.nodes.push(Node { value, requires, grad_leaf: false });
        let out = Var(self.nodes.len() - 1);
        if requires {
            self.ops.push(OpRecord { out: out.0, backward: backward() });
        }
        out
    }

    // ── elementwise and reduction primitives ────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "add: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = TensorBase::from_fn(self.shape(a).to_vec(), |i| {
            self.value(a).data()[i] + self.value(b).data()[i]
        });
        let req = self.requires(a) || self.requires(b);
        Ok(self.push_op(out, req, || {
            Box::new(move |g| vec![(a, g.clone()), (b, g.clone())])
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "mul: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        let out = TensorBase::from_fn(va.shape().to_vec(), |i| va.data()[i] * vb.data()[i]);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push_op(out, req, || {
            Box::new(move |g| {
                let ga = TensorBase::from_fn(g.shape().to_vec(), |i| g.data()[i] * vb.data()[i]);
                let gb = TensorBase::from_fn(g.shape().to_vec(), |i| g.data()[i] * va.data()[i]);
                vec![(a, ga), (b, gb)]
            })
        }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let cs = S::of_f64(c);
        let out = self.value(x).map(|v| v * cs);
        let req = self.requires(x);
        self.push_op(out, req, || {
            Box::new(move |g| vec![(x, g.map(|v| v * cs))])
        })
    }

    /// Broadcast `bias` (shape `[d]`) over the last dimension of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| Error::shape("add_bias: 0-d input"))?;
        if self.shape(bias) != [d] {
            return Err(Error::shape(format!(
                "add_bias: bias {:?} does not match last dim of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let vb = self.value(bias).clone();
        let out = TensorBase::from_fn(self.shape(x).to_vec(), |i| {
            self.value(x).data()[i] + vb.data()[i % d]
        });
        let req = self.requires(x) || self.requires(bias);
        Ok(self.push_op(out, req, || {
            Box::new(move |g| {
                let mut gb = vec![S::zero(); d];
                for (i, &gi) in g.data().iter().enumerate() {
                    gb[i % d] += gi;
                }
                vec![(x, g.clone()), (bias, TensorBase::new(vec![d], gb).unwrap())]
            })
        }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().fold(S::zero(), |acc, &v| acc + v);
        let in_shape = self.shape(x).to_vec();
        let req = self.requires(x);
        self.push_op(TensorBase::scalar(total), req, || {
            Box::new(move |g| vec![(x, TensorBase::full(in_shape.clone(), g.item()))])
        })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let inv = S::of_usize(n).recip();
        let total = self.value(x).data().iter().fold(S::zero(), |acc, &v| acc + v);
        let in_shape = self.shape(x).to_vec();
        let req = self.requires(x);
        self.push_op(TensorBase::scalar(total * inv), req, || {
            Box::new(move |g| vec![(x, TensorBase::full(in_shape.clone(), g.item() * inv))])
        })
    }

    // ── activations ─────────────────────────────────────────────────────

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let vx = self.value(x).clone();
        let out = vx.map(|v| v * sigmoid(v));
        let req = self.requires(x);
        self.push_op(out, req, || {
            Box::new(move |g| {
                let gx = TensorBase::from_fn(g.shape().to_vec(), |i| {
                    let v = vx.data()[i];
                    let s = sigmoid(v);
                    g.data()[i] * s * (S::one() + v * (S::one() - s))
                });
                vec![(x, gx)]
            })
        })
    }

    /// `ln(1 + e^x)`, numerically stable.
    pub fn softplus(&mut self, x: Var) -> Var {
        let vx = self.value(x).clone();
        let out = vx.map(softplus);
        let req = self.requires(x);
        self.push_op(out, req, || {
            Box::new(move |g| {
                let gx = TensorBase::from_fn(g.shape().to_vec(), |i| {
                    g.data()[i] * sigmoid(vx.data()[i])
                });
                vec![(x, gx)]
            })
        })
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// `a [m,k] @ b [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!(
                "matmul: incompatible shapes {:?} x {:?}",
                sa, sb
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        let out = matmul_raw(va.data(), vb.data(), m, k, n);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push_op(TensorBase::new(vec![m, n], out)?, req, || {
            Box::new(move |g| {
                // dA = g @ B^T, dB = A^T @ g
                let gd = g.data();
                let mut da = vec![S::zero(); m * k];
                for i in 0..m {
                    for l in 0..k {
                        let mut acc = S::zero();
                        for j in 0..n {
                            acc += gd[i * n + j] * vb.data()[l * n + j];
                        }
                        da[i * k + l] = acc;
                    }
                }
                let mut db = vec![S::zero(); k * n];
                for l in 0..k {
                    for i in 0..m {
                        let ail = va.data()[i * k + l];
                        for j in 0..n {
                            db[l * n + j] += ail * gd[i * n + j];
                        }
                    }
                }
                vec![
                    (a, TensorBase::new(vec![m, k], da).unwrap()),
                    (b, TensorBase::new(vec![k, n], db).unwrap()),
                ]
            })
        }))
    }

    // ── normalization ───────────────────────────────────────────────────

    /// Standardize over the last dimension, then apply `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm: 0-d input"))?;
        if d == 0 {
            return Err(Error::shape("layer_norm: zero-length last dim"));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(format!(
                "layer_norm: gamma {:?} / beta {:?} do not match last dim of {:?}",
                self.shape(gamma),
                self.shape(beta),
                shape
            )));
        }
        let rows = self.value(x).numel() / d;
        let vx = self.value(x).clone();
        let vg = self.value(gamma).clone();
        let vb = self.value(beta).clone();
        let epss = S::of_f64(eps);
        let inv_d = S::of_usize(d).recip();

        let mut out = vec![S::zero(); rows * d];
        let mut xhat = vec![S::zero(); rows * d];
        let mut inv_std = vec![S::zero(); rows];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().fold(S::zero(), |a, &v| a + v) * inv_d;
            let var = row
                .iter()
                .fold(S::zero(), |a, &v| a + (v - mean) * (v - mean))
                * inv_d;
            let istd = (var + epss).sqrt().recip();
            inv_std[r] = istd;
            for j in 0..d {
                let xh = (row[j] - mean) * istd;
                xhat[r * d + j] = xh;
                out[r * d + j] = vg.data()[j] * xh + vb.data()[j];
            }
        }
        let xhat = TensorBase::new(shape.clone(), xhat)?;
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push_op(TensorBase::new(shape, out)?, req, || {
            Box::new(move |g| {
                let gd = g.data();
                let mut dx = vec![S::zero(); rows * d];
                let mut dgamma = vec![S::zero(); d];
                let mut dbeta = vec![S::zero(); d];
                #[allow(clippy::needless_range_loop)] // r indexes both rows and inv_std
                for r in 0..rows {
                    let base = r * d;
                    let mut mean_h = S::zero();
                    let mut mean_hx = S::zero();
                    for j in 0..d {
                        let h = vg.data()[j] * gd[base + j];
                        mean_h += h;
                        mean_hx += h * xhat.data()[base + j];
                        dgamma[j] += gd[base + j] * xhat.data()[base + j];
                        dbeta[j] += gd[base + j];
                    }
                    mean_h *= inv_d;
                    mean_hx *= inv_d;
                    for j in 0..d {
                        let h = vg.data()[j] * gd[base + j];
                        dx[base + j] =
                            (h - mean_h - xhat.data()[base + j] * mean_hx) * inv_std[r];
                    }
                }
                vec![
                    (x, TensorBase::new(xhat.shape().to_vec(), dx).unwrap()),
                    (gamma, TensorBase::new(vec![d], dgamma).unwrap()),
                    (beta, TensorBase::new(vec![d], dbeta).unwrap()),
                ]
            })
        }))
    }

    // ── convolution ─────────────────────────────────────────────────────

    /// Per-channel 2-D cross-correlation with zero padding; spatial extent
    /// preserved. `x` is `[H,W,C]`, `kernel` is `[k,k,C]` with odd `k`.
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() != 3 || sk.len() != 3 {
            return Err(Error::shape(format!(
                "depthwise_conv2d: expected [H,W,C] and [k,k,C], got {:?} and {:?}",
                sx, sk
            )));
        }
        let (h, w, c) = (sx[0], sx[1], sx[2]);
        let k = sk[0];
        if sk[1] != k || sk[2] != c {
            return Err(Error::shape(format!(
                "depthwise_conv2d: kernel {:?} does not match input {:?}",
                sk, sx
            )));
        }
        if k.is_multiple_of(2) {
            return Err(Error::shape(format!(
                "depthwise_conv2d: kernel size {k} must be odd"
            )));
        }
        let r = (k / 2) as isize;
        let vx = self.value(x).clone();
        let vk = self.value(kernel).clone();

        let mut out = vec![S::zero(); h * w * c];
        for i in 0..h as isize {
            for j in 0..w as isize {
                for u in -r..=r {
                    let ii = i + u;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for v in -r..=r {
                        let jj = j + v;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let xb = (ii as usize * w + jj as usize) * c;
                        let kb = ((u + r) as usize * k + (v + r) as usize) * c;
                        let ob = (i as usize * w + j as usize) * c;
                        for ch in 0..c {
                            out[ob + ch] += vx.data()[xb + ch] * vk.data()[kb + ch];
                        }
                    }
                }
            }
        }
        let req = self.requires(x) || self.requires(kernel);
        Ok(self.push_op(TensorBase::new(vec![h, w, c], out)?, req, || {
            Box::new(move |g| {
                let gd = g.data();
                let mut dx = vec![S::zero(); h * w * c];
                let mut dk = vec![S::zero(); k * k * c];
                for i in 0..h as isize {
                    for j in 0..w as isize {
                        let ob = (i as usize * w + j as usize) * c;
                        for u in -r..=r {
                            let ii = i + u;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for v in -r..=r {
                                let jj = j + v;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                let xb = (ii as usize * w + jj as usize) * c;
                                let kb = ((u + r) as usize * k + (v + r) as usize) * c;
                                for ch in 0..c {
                                    dx[xb + ch] += gd[ob + ch] * vk.data()[kb + ch];
                                    dk[kb + ch] += gd[ob + ch] * vx.data()[xb + ch];
                                }
                            }
                        }
                    }
                }
                vec![
                    (x, TensorBase::new(vec![h, w, c], dx).unwrap()),
                    (kernel, TensorBase::new(vec![k, k, c], dk).unwrap()),
                ]
            })
        }))
    }

    // ── regularization ──────────────────────────────────────────────────

    /// Inverted dropout. Evaluation mode (or `p == 0`) is the exact identity.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Numeric(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = S::of_f64(1.0 / (1.0 - p));
        let mask: Arc<Vec<S>> = Arc::new(
            (0..self.value(x).numel())
                .map(|_| if rng.bernoulli(p) { S::zero() } else { keep })
                .collect(),
        );
        let m = Arc::clone(&mask);
        let out = TensorBase::from_fn(self.shape(x).to_vec(), |i| {
            self.value(x).data()[i] * mask[i]
        });
        let req = self.requires(x);
        Ok(self.push_op(out, req, || {
            Box::new(move |g| {
                let gx = TensorBase::from_fn(g.shape().to_vec(), |i| g.data()[i] * m[i]);
                vec![(x, gx)]
            })
        }))
    }

    // ── data movement ───────────────────────────────────────────────────

    /// View under a new shape; data is shared, gradients flow through.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        let in_shape = self.shape(x).to_vec();
        let req = self.requires(x);
        Ok(self.push_op(out, req, || {
            Box::new(move |g| vec![(x, g.reshaped(in_shape.clone()).unwrap())])
        }))
    }

    /// `out[i] = x[indices[i]]`; backward scatter-adds.
    pub fn gather(&mut self, x: Var, out_shape: Vec<usize>, indices: Arc<Vec<usize>>) -> Result<Var> {
        let n: usize = out_shape.iter().product();
        if n != indices.len() {
            return Err(Error::shape(format!(
                "gather: out shape {:?} needs {} indices, got {}",
                out_shape,
                n,
                indices.len()
            )));
        }
        let in_len = self.value(x).numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= in_len) {
            return Err(Error::shape(format!(
                "gather: index {bad} out of bounds for input of {in_len} elements"
            )));
        }
        let idx = Arc::clone(&indices);
        let out = TensorBase::from_fn(out_shape, |i| self.value(x).data()[indices[i]]);
        let in_shape = self.shape(x).to_vec();
        let req = self.requires(x);
        Ok(self.push_op(out, req, || {
            Box::new(move |g| {
                let mut acc = vec![S::zero(); in_shape.iter().product()];
                for (i, &src) in idx.iter().enumerate() {
                    acc[src] += g.data()[i];
                }
                vec![(x, TensorBase::new(in_shape.clone(), acc).unwrap())]
            })
        }))
    }

    // ── backward pass ───────────────────────────────────────────────────

    /// Accumulate gradients of a scalar loss for every tracked node.
    /// Grad-tracked leaves that do not influence the loss get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Numeric(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<TensorBase<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(TensorBase::ones(vec![1]));
        for op in self.ops.iter().rev() {
            let Some(g) = grads[op.out].clone() else { continue };
            for (var, contrib) in (op.backward)(&g) {
                if !self.nodes[var.0].requires {
                    continue;
                }
                debug_assert_eq!(
                    contrib.shape(),
                    self.nodes[var.0].value.shape(),
                    "gradient shape mismatch"
                );
                match &mut grads[var.0] {
                    Some(existing) => {
                        let dst = existing.data_mut();
                        for (d, &s) in dst.iter_mut().zip(contrib.data()) {
                            *d += s;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.grad_leaf && grads[i].is_none() {
                grads[i] = Some(TensorBase::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }
}

pub(crate) fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for l in 0..k {
            let ail = a[i * k + l];
            if ail == S::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += ail * brow[j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    type Tensor = TensorBase<f64>;
    type Tape = TapeBase<f64>;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_zero_case() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(t(&[3, 4], &[1.0; 12]));
        let y = tape.matmul(z, b).unwrap();
        assert_eq!(tape.shape(y), &[2, 4]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![4, 5]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn silu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 1.0]));
        let y = tape.silu(x);
        assert_eq!(tape.value(y).data()[0], 0.0);
        assert!((tape.value(y).data()[1] - 0.7310585786300049).abs() < 1e-15);
    }

    #[test]
    fn silu_odd_identity() {
        // silu(-x) = -x + silu(x)
        let mut tape = Tape::new();
        for &x in &[-3.0, -0.7, 0.3, 2.5_f64] {
            let a = tape.constant(Tensor::scalar(-x));
            let b = tape.constant(Tensor::scalar(x));
            let sa = tape.silu(a);
            let sb = tape.silu(b);
            let lhs = tape.value(sa).item();
            let rhs = -x + tape.value(sb).item();
            assert!((lhs - rhs).abs() < 1e-14, "x={x}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[5.0, 5.0, 5.0]));
        let g = tape.constant(Tensor::ones(vec![3]));
        let b = tape.constant(Tensor::zeros(vec![3]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 3.0]));
        let g = tape.constant(Tensor::ones(vec![2]));
        let b = tape.constant(Tensor::zeros(vec![2]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        assert!((tape.value(y).data()[0] + 1.0).abs() < 1e-5);
        assert!((tape.value(y).data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_zero_gamma_collapses_to_beta() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[0.3, -1.0, 4.0, 2.0, 2.5, -0.5]));
        let g = tape.constant(Tensor::zeros(vec![3]));
        let b = tape.constant(t(&[3], &[7.0, 8.0, 9.0]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0, 8.0, 9.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut rng = Rng::seed_from(11);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::uniform(vec![4, 16], -3.0, 3.0, &mut rng));
        let g = tape.constant(Tensor::ones(vec![16]));
        let b = tape.constant(Tensor::zeros(vec![16]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let data = tape.value(y).data();
        for r in 0..4 {
            let row = &data[r * 16..(r + 1) * 16];
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() <= 1e-10, "row mean {mean}");
            assert!((var - 1.0).abs() <= 1e-6, "row var {var}");
        }
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut rng = Rng::seed_from(5);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::uniform(vec![4, 5, 2], -1.0, 1.0, &mut rng));
        let mut k = Tensor::zeros(vec![3, 3, 2]);
        k.data_mut()[(1 * 3 + 1) * 2] = 1.0;
        k.data_mut()[(1 * 3 + 1) * 2 + 1] = 1.0;
        let kv = tape.constant(k);
        let y = tape.depthwise_conv2d(x, kv).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv_single_pixel_all_ones_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1], &[4.5]));
        let k = tape.constant(Tensor::ones(vec![3, 3, 1]));
        let y = tape.depthwise_conv2d(x, k).unwrap();
        assert_eq!(tape.value(y).data(), &[4.5]);
    }

    #[test]
    fn conv_constant_interior_sums_nine() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![5, 5, 1], 2.0));
        let k = tape.constant(Tensor::ones(vec![3, 3, 1]));
        let y = tape.depthwise_conv2d(x, k).unwrap();
        assert_eq!(tape.value(y).at(&[2, 2, 0]), 18.0);
        // Corner only sees a 2x2 window.
        assert_eq!(tape.value(y).at(&[0, 0, 0]), 8.0);
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![4, 4, 1]));
        let k = tape.constant(Tensor::zeros(vec![2, 2, 1]));
        assert!(tape.depthwise_conv2d(x, k).is_err());
    }

    #[test]
    fn dropout_eval_is_exact_identity() {
        let mut rng = Rng::seed_from(1);
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.dropout(x, 0.7, false, &mut rng).unwrap();
        assert_eq!(x, y);
        let z = tape.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(x, z);
    }

    #[test]
    fn dropout_rejects_p_at_least_one() {
        let mut rng = Rng::seed_from(1);
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[1.0]));
        assert!(tape.dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_deterministic_and_unbiased() {
        let x = Tensor::full(vec![64], 2.0);
        // Fixed seed gives a fixed mask.
        let run = |seed| {
            let mut rng = Rng::seed_from(seed);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let y = tape.dropout(xv, 0.5, true, &mut rng).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run(9), run(9));

        // Mean over many trials approaches x (3-sigma Monte Carlo bound).
        let trials = 4000;
        let mut acc = vec![0.0; 64];
        for s in 0..trials {
            let y = run(s as u64);
            for (a, &v) in acc.iter_mut().zip(y.data()) {
                *a += v;
            }
        }
        let sigma = 2.0 * (0.5f64 / 0.5 / trials as f64).sqrt();
        for a in &acc {
            let mean = a / trials as f64;
            assert!(
                (mean - 2.0).abs() < 3.0 * sigma,
                "mean {mean} beyond 3 sigma {sigma}"
            );
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]), true);
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn unused_tracked_leaf_gets_zeros() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let unused = tape.leaf(t(&[3], &[1.0, 1.0, 1.0]), true);
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_scatter_roundtrip_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], &[1.0, 2.0, 3.0, 4.0]), true);
        // Duplicate index 0; drop index 3.
        let idx = Arc::new(vec![0usize, 0, 1, 2]);
        let y = tape.gather(x, vec![4], idx).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 2.0, 3.0]);
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn forward_is_pure() {
        let run = || {
            let mut rng = Rng::seed_from(2);
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::uniform(vec![3, 3], -1.0, 1.0, &mut rng));
            let w = tape.constant(Tensor::uniform(vec![3, 3], -1.0, 1.0, &mut rng));
            let y = tape.matmul(x, w).unwrap();
            let s = tape.silu(y);
            tape.value(s).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clear_frees_recorded_state() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let _ = tape.mul(x, x).unwrap();
        assert!(tape.num_nodes() > 0 && tape.num_ops() > 0);
        tape.clear();
        assert_eq!(tape.num_nodes(), 0);
        assert_eq!(tape.num_ops(), 0);
    }

    #[test]
    fn eval_mode_records_no_backward_ops() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), false);
        let y = tape.mul(x, x).unwrap();
        let _ = tape.silu(y);
        assert_eq!(tape.num_ops(), 0);
    }
}
