//! Parameters, SGD with momentum, and step-decay schedules.

use std::ops::{Add, AddAssign, Mul, Sub};

use serde::{Deserialize, Serialize};

pub trait Real:
    Copy
    + Default
    + PartialEq
    + Add<Output = Self>
    + AddAssign
    + Mul<Output = Self>
    + Sub<Output = Self>
{
    fn from_f64(v: f64) -> Self;
    fn is_finite(self) -> bool;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// A trainable tensor with its gradient accumulator and momentum buffer.
/// Only `value` is serialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Param<T: Real> {
    pub value: Vec<T>,
    #[serde(skip)]
    pub grad: Vec<T>,
    #[serde(skip)]
    pub velocity: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Vec<T>) -> Self {
        let n = value.len();
        Self {
            value,
            grad: vec![T::default(); n],
            velocity: vec![T::default(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        let n = self.value.len();
        self.grad.clear();
        self.grad.resize(n, T::default());
        if self.velocity.len() != n {
            self.velocity = vec![T::default(); n];
        }
    }

    pub fn reset_momentum(&mut self) {
        self.velocity = vec![T::default(); self.value.len()];
    }

    pub fn grad_is_finite(&self) -> bool {
        self.grad.iter().all(|g| g.is_finite())
    }

    /// `v ← μ·v + (g + λ·w)`, `w ← w − η·v`.
    pub fn sgd_step(&mut self, lr: f64, momentum: f64, weight_decay: f64) {
        let (lr, mu, wd) = (
            T::from_f64(lr),
            T::from_f64(momentum),
            T::from_f64(weight_decay),
        );
        for ((w, &g), v) in self
            .value
            .iter_mut()
            .zip(&self.grad)
            .zip(self.velocity.iter_mut())
        {
            let step = g + wd * *w;
            *v = mu * *v + step;
            *w = *w - lr * *v;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at which the learning rate is multiplied by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f64,
}

impl SgdConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.decay.powi(passed as i32)
    }
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![20, 30],
            decay: 0.1,
        }
    }
}
