use crate::error::{arg_err, Result};
use crate::scalar::Scalar;

/// Training hyper-parameters shared by every SGD-trained network.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyper {
    pub batch: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_gamma: f64,
    pub lr_power: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            batch: 256,
            base_lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_gamma: 1e-4,
            lr_power: 0.75,
            epochs: 20,
            seed: 0,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return arg_err("batch must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return arg_err(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return arg_err(format!("weight decay {} must be non-negative", self.weight_decay));
        }
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return arg_err(format!("learning rate {} must be finite and non-negative", self.base_lr));
        }
        if !(self.lr_gamma >= 0.0) || !(self.lr_power >= 0.0) {
            return arg_err("lr_gamma and lr_power must be non-negative");
        }
        Ok(())
    }
}

/// `base_lr · (1 + γ·iter)^(−p)`.
pub fn lr_inverse(iter: u64, hyper: &Hyper) -> f64 {
    hyper.base_lr * (1.0 + hyper.lr_gamma * iter as f64).powf(-hyper.lr_power)
}

/// One momentum step on a single parameter tensor:
/// `v ← μv − lr(g + λθ)`, `θ ← θ + v`.
pub fn sgd_step<T: Scalar>(param: &mut [T], grad: &[T], velocity: &mut [T], hyper: &Hyper, lr: f64) {
    assert_eq!(param.len(), grad.len());
    assert_eq!(param.len(), velocity.len());
    let mu = T::lit(hyper.momentum);
    let wd = T::lit(hyper.weight_decay);
    let lr = T::lit(lr);
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = mu * *v - lr * (g + wd * *p);
        *p += *v;
    }
}
