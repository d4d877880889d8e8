//! Adaptive moment estimation over a visitor-enumerated parameter set.

use crate::scalar::Scalar;
use crate::tensor::{Param, Tensor};

pub const DEFAULT_LR: f64 = 2e-4;

/// Adam without weight decay. Moments are kept in parameter visit order.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub first: Vec<Tensor<S>>,
    pub second: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, steps: 0, first: Vec::new(), second: Vec::new() }
    }

    /// Starts a step; call [`Adam::update`] on every parameter in visit order.
    pub fn begin_step(&mut self) -> AdamStep<'_, S> {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        AdamStep {
            lr: S::of(self.lr * bc2.sqrt() / bc1),
            b1: S::of(self.beta1),
            b2: S::of(self.beta2),
            eps: S::of(self.eps * bc2.sqrt()),
            index: 0,
            opt: self,
        }
    }
}

pub struct AdamStep<'a, S> {
    opt: &'a mut Adam<S>,
    lr: S,
    b1: S,
    b2: S,
    eps: S,
    index: usize,
}

impl<S: Scalar> AdamStep<'_, S> {
    /// Updates `p` from its accumulated gradient and clears the gradient.
    pub fn update(&mut self, p: &mut Param<S>) {
        let i = self.index;
        self.index += 1;
        if self.opt.first.len() == i {
            self.opt.first.push(Tensor::zeros(p.value.shape()));
            self.opt.second.push(Tensor::zeros(p.value.shape()));
        }
        let one = S::one();
        let (m, v) = (self.opt.first[i].data_mut(), self.opt.second[i].data_mut());
        let (w, g) = (p.value.data_mut(), p.grad.data_mut());
        for j in 0..w.len() {
            m[j] = self.b1 * m[j] + (one - self.b1) * g[j];
            v[j] = self.b2 * v[j] + (one - self.b2) * g[j] * g[j];
            w[j] -= self.lr * m[j] / (v[j].sqrt() + self.eps);
            g[j] = S::zero();
        }
    }
}
