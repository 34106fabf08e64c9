//! Decoupled-weight-decay Adam and the cosine-annealing learning-rate
//! schedule.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

/// Cosine annealing from `eta_max` down to `eta_min` over `t_max` epochs,
/// clamped at `eta_min` afterwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub eta_max: f64,
    pub eta_min: f64,
    pub t_max: u32,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { eta_max: 1e-3, eta_min: 1e-5, t_max: 50 }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_min <= self.eta_max && self.eta_min >= 0.0 && self.eta_max.is_finite()) {
            return Err(Error::Numeric(format!(
                "schedule requires 0 <= eta_min <= eta_max, got {} / {}",
                self.eta_min, self.eta_max
            )));
        }
        if self.t_max == 0 {
            return Err(Error::Numeric("schedule requires t_max >= 1".into()));
        }
        Ok(())
    }
}

/// Learning rate at epoch `t`. The endpoints are exact by construction.
pub fn cosine_lr(t: u32, sched: &Schedule) -> f64 {
    if t == 0 {
        return sched.eta_max;
    }
    if t >= sched.t_max {
        return sched.eta_min;
    }
    let frac = t as f64 / sched.t_max as f64;
    sched.eta_min + 0.5 * (sched.eta_max - sched.eta_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// AdamW state: first/second moments per parameter plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamW<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<TensorBase<S>>,
    v: Vec<TensorBase<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(param_shapes: &[Vec<usize>], weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: param_shapes.iter().map(|s| TensorBase::zeros(s.clone())).collect(),
            v: param_shapes.iter().map(|s| TensorBase::zeros(s.clone())).collect(),
        }
    }

    pub fn moments(&self) -> (&[TensorBase<S>], &[TensorBase<S>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<TensorBase<S>>, v: Vec<TensorBase<S>>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }

    /// One update: decoupled decay (`p -= lr*wd*p`), then bias-corrected Adam.
    pub fn step(
        &mut self,
        params: &mut [TensorBase<S>],
        grads: &[TensorBase<S>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::shape(format!(
                "adamw: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "adamw: param {:?} vs grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let mut x = pd[i].as_f64();
                let grad = g.data()[i].as_f64();
                x -= lr * self.weight_decay * x;
                let mi = b1 * md[i].as_f64() + (1.0 - b1) * grad;
                let vi = b2 * vd[i].as_f64() + (1.0 - b2) * grad * grad;
                md[i] = S::of_f64(mi);
                vd[i] = S::of_f64(vi);
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                x -= lr * m_hat / (v_hat.sqrt() + self.eps);
                pd[i] = S::of_f64(x);
            }
        }
        Ok(())
    }
}
