use rand::Rng;

use crate::error::{PdmError, Result};
use crate::scalar::{matmul, matmul_at_acc, Scalar};
use crate::tensor::{join, Module, Param, Tensor};

/// Affine map `y = W x + b` applied to each row of an `[N, in]` batch.
#[derive(Clone, Debug)]
pub struct Linear<S> {
    pub weight: Param<S>,
    pub bias: Param<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(Tensor::randn(&[output, input], 1.0 / (input as f64).sqrt(), rng)),
            bias: Param::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, i) = match *x.shape() {
            [n, i] => (n, i),
            _ => return Err(PdmError::ShapeMismatch { expected: vec![0, self.input_dim()], got: x.shape().to_vec() }),
        };
        if i != self.input_dim() {
            return Err(PdmError::DimensionMismatch { expected: self.input_dim(), got: i });
        }
        let o = self.output_dim();
        let mut y = Tensor::zeros(&[n, o]);
        // y = x W^T
        S::gemm(n, i, o, S::one(), x.data(), i as isize, 1, self.weight.value.data(), 1, i as isize, S::zero(), y.data_mut(), o as isize, 1);
        let b = self.bias.value.data();
        for row in y.data_mut().chunks_mut(o) {
            row.iter_mut().zip(b).for_each(|(v, &bb)| *v += bb);
        }
        Ok(y)
    }

    /// Accumulates parameter gradients; `x` is the forward input.
    pub fn backward(&mut self, x: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
        let (n, i, o) = (x.shape()[0], self.input_dim(), self.output_dim());
        matmul_at_acc(o, n, i, dy.data(), x.data(), self.weight.grad.data_mut());
        let db = self.bias.grad.data_mut();
        for row in dy.data().chunks(o) {
            db.iter_mut().zip(row).for_each(|(g, &d)| *g += d);
        }
        let mut dx = Tensor::zeros(&[n, i]);
        matmul(n, o, i, dy.data(), self.weight.value.data(), dx.data_mut());
        dx
    }
}

impl<S: Scalar> Module<S> for Linear<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
