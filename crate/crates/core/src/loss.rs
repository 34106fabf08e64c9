//! Training losses as fused tape ops: binary/multi-class cross-entropy on
//! logits and soft Dice, plus their weighted combinations. Targets are
//! constants; gradients flow to the logits only.

use crate::error::{Error, Result};
use crate::scalar::{sigmoid, Scalar};
use crate::tape::{TapeBase, Var};
use crate::tensor::TensorBase;

/// Probability clamp for the cross-entropy logs.
pub const PROB_CLAMP_EPS: f64 = 1e-7;
/// Additive smoothing for soft Dice.
pub const DICE_SMOOTH: f64 = 1.0;

/// Weights of the combined losses; all default to 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 1.0, lambda2: 1.0, lambda3: 1.0, lambda4: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Numeric(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_binary_target(target: &[f64]) -> Result<()> {
    if let Some(&bad) = target.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Data(format!("binary target contains {bad}, expected 0 or 1")));
    }
    Ok(())
}

impl<S: Scalar> TapeBase<S> {
    /// Mean binary cross-entropy of `sigmoid(logits)` against a 0/1 target,
    /// with probabilities clamped to `[eps, 1-eps]`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[f64], eps: f64) -> Result<Var> {
        let v = self.value(logits).clone();
        if v.numel() != target.len() {
            return Err(Error::shape(format!(
                "bce: logits {:?} vs target of {} elements",
                v.shape(),
                target.len()
            )));
        }
        check_binary_target(target)?;
        let n = v.numel();
        let inv_n = 1.0 / n as f64;
        let mut total = 0.0;
        for (i, &z) in v.data().iter().enumerate() {
            let p = sigmoid(z.as_f64()).clamp(eps, 1.0 - eps);
            let y = target[i];
            total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        let target = target.to_vec();
        let req = self.value_requires(logits);
        Ok(self.push_op(TensorBase::scalar(S::of_f64(total * inv_n)), req, || {
            Box::new(move |g| {
                let go = g.item().as_f64();
                let gx = TensorBase::from_fn(v.shape().to_vec(), |i| {
                    let p = sigmoid(v.data()[i].as_f64());
                    if p <= eps || p >= 1.0 - eps {
                        S::zero()
                    } else {
                        S::of_f64(go * (p - target[i]) * inv_n)
                    }
                });
                vec![(logits, gx)]
            })
        }))
    }

    /// Mean multi-class cross-entropy of row-wise softmax against class ids.
    pub fn ce_with_logits(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let v = self.value(logits).clone();
        let (p, k) = match v.shape() {
            [p, k] if *k >= 2 => (*p, *k),
            s => {
                return Err(Error::shape(format!(
                    "ce: logits must be [P,K] with K >= 2, got {s:?}"
                )))
            }
        };
        if labels.len() != p {
            return Err(Error::shape(format!(
                "ce: {p} rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&c| c as usize >= k) {
            return Err(Error::Data(format!("ce: class id {bad} out of range [0,{k})")));
        }
        let inv_p = 1.0 / p as f64;
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &v.data()[r * k..(r + 1) * k];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z.as_f64()));
            let lse = max
                + row
                    .iter()
                    .map(|&z| (z.as_f64() - max).exp())
                    .sum::<f64>()
                    .ln();
            total += lse - row[y as usize].as_f64();
        }
        let labels = labels.to_vec();
        let req = self.value_requires(logits);
        Ok(self.push_op(TensorBase::scalar(S::of_f64(total * inv_p)), req, || {
            Box::new(move |g| {
                let go = g.item().as_f64();
                let mut dx = vec![S::zero(); p * k];
                for (r, &y) in labels.iter().enumerate() {
                    let row = &v.data()[r * k..(r + 1) * k];
                    let max = row.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z.as_f64()));
                    let denom: f64 = row.iter().map(|&z| (z.as_f64() - max).exp()).sum();
                    for c in 0..k {
                        let soft = (row[c].as_f64() - max).exp() / denom;
                        let ind = if c == y as usize { 1.0 } else { 0.0 };
                        dx[r * k + c] = S::of_f64(go * (soft - ind) * inv_p);
                    }
                }
                vec![(logits, TensorBase::new(v.shape().to_vec(), dx).unwrap())]
            })
        }))
    }

    /// Soft Dice loss on `sigmoid(logits)`:
    /// `1 - (2*sum(p*y) + smooth) / (sum(p) + sum(y) + smooth)`.
    pub fn dice_sigmoid(&mut self, logits: Var, target: &[f64], smooth: f64) -> Result<Var> {
        let v = self.value(logits).clone();
        if v.numel() != target.len() {
            return Err(Error::shape(format!(
                "dice: logits {:?} vs target of {} elements",
                v.shape(),
                target.len()
            )));
        }
        check_binary_target(target)?;
        let probs: Vec<f64> = v.data().iter().map(|&z| sigmoid(z.as_f64())).collect();
        let inter: f64 = probs.iter().zip(target).map(|(p, y)| p * y).sum();
        let sums: f64 = probs.iter().sum::<f64>() + target.iter().sum::<f64>();
        let loss = 1.0 - (2.0 * inter + smooth) / (sums + smooth);
        let target = target.to_vec();
        let req = self.value_requires(logits);
        Ok(self.push_op(TensorBase::scalar(S::of_f64(loss)), req, || {
            Box::new(move |g| {
                let go = g.item().as_f64();
                let denom = sums + smooth;
                let gx = TensorBase::from_fn(v.shape().to_vec(), |i| {
                    let p = sigmoid(v.data()[i].as_f64());
                    let dl_dp = -(2.0 * target[i] * denom - (2.0 * inter + smooth)) / (denom * denom);
                    S::of_f64(go * dl_dp * p * (1.0 - p))
                });
                vec![(logits, gx)]
            })
        }))
    }

    /// Soft Dice on row-wise softmax, averaged over all `K` classes
    /// (background included).
    pub fn dice_softmax(&mut self, logits: Var, labels: &[u8], smooth: f64) -> Result<Var> {
        let v = self.value(logits).clone();
        let (p, k) = match v.shape() {
            [p, k] if *k >= 2 => (*p, *k),
            s => {
                return Err(Error::shape(format!(
                    "dice: logits must be [P,K] with K >= 2, got {s:?}"
                )))
            }
        };
        if labels.len() != p {
            return Err(Error::shape(format!(
                "dice: {p} rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&c| c as usize >= k) {
            return Err(Error::Data(format!("dice: class id {bad} out of range [0,{k})")));
        }
        // Row softmax.
        let mut probs = vec![0.0f64; p * k];
        for r in 0..p {
            let row = &v.data()[r * k..(r + 1) * k];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z.as_f64()));
            let mut denom = 0.0;
            for c in 0..k {
                let e = (row[c].as_f64() - max).exp();
                probs[r * k + c] = e;
                denom += e;
            }
            for c in 0..k {
                probs[r * k + c] /= denom;
            }
        }
        let mut inter = vec![0.0f64; k];
        let mut sums = vec![0.0f64; k];
        for r in 0..p {
            let y = labels[r] as usize;
            for c in 0..k {
                let pr = probs[r * k + c];
                sums[c] += pr;
                if c == y {
                    inter[c] += pr;
                    sums[c] += 1.0;
                }
            }
        }
        let mut dice_sum = 0.0;
        for c in 0..k {
            dice_sum += (2.0 * inter[c] + smooth) / (sums[c] + smooth);
        }
        let loss = 1.0 - dice_sum / k as f64;
        let labels = labels.to_vec();
        let req = self.value_requires(logits);
        Ok(self.push_op(TensorBase::scalar(S::of_f64(loss)), req, || {
            Box::new(move |g| {
                let go = g.item().as_f64();
                // dL/dp, then through the softmax Jacobian.
                let mut dl_dp = vec![0.0f64; p * k];
                for r in 0..p {
                    let y = labels[r] as usize;
                    for c in 0..k {
                        let denom = sums[c] + smooth;
                        let ind = if c == y { 1.0 } else { 0.0 };
                        dl_dp[r * k + c] =
                            -(2.0 * ind * denom - (2.0 * inter[c] + smooth)) / (denom * denom)
                                / k as f64;
                    }
                }
                let mut dx = vec![S::zero(); p * k];
                for r in 0..p {
                    let mut dot = 0.0;
                    for c in 0..k {
                        dot += dl_dp[r * k + c] * probs[r * k + c];
                    }
                    for c in 0..k {
                        let pr = probs[r * k + c];
                        dx[r * k + c] = S::of_f64(go * pr * (dl_dp[r * k + c] - dot));
                    }
                }
                vec![(logits, TensorBase::new(v.shape().to_vec(), dx).unwrap())]
            })
        }))
    }

    /// `lambda1 * bce + lambda2 * soft dice` for binary tasks.
    pub fn bcedice(&mut self, logits: Var, target: &[f64], w: &LossWeights) -> Result<Var> {
        w.validate()?;
        let bce = self.bce_with_logits(logits, target, PROB_CLAMP_EPS)?;
        let dice = self.dice_sigmoid(logits, target, DICE_SMOOTH)?;
        let a = self.scale(bce, w.lambda1);
        let b = self.scale(dice, w.lambda2);
        self.add(a, b)
    }

    /// `lambda3 * ce + lambda4 * soft dice` for multi-class tasks.
    pub fn cedice(&mut self, logits: Var, labels: &[u8], w: &LossWeights) -> Result<Var> {
        w.validate()?;
        let ce = self.ce_with_logits(logits, labels)?;
        let dice = self.dice_softmax(logits, labels, DICE_SMOOTH)?;
        let a = self.scale(ce, w.lambda3);
        let b = self.scale(dice, w.lambda4);
        self.add(a, b)
    }
}
