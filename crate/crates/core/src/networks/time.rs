use rand::Rng;

use crate::error::{PdmError, Result};
use crate::nn::Linear;
use crate::scalar::Scalar;
use crate::tensor::{join, Module, Param, Tensor};

/// Sinusoidal features: `[2i] = sin(t / 10000^(2i/D))`, `[2i+1] = cos(...)`.
pub fn sinusoidal<S: Scalar>(t: f64, dim: usize) -> Vec<S> {
    (0..dim)
        .map(|j| {
            let i = j / 2;
            let freq = 10000f64.powf(-((2 * i) as f64) / dim as f64);
            let arg = t * freq;
            S::of(if j % 2 == 0 { arg.sin() } else { arg.cos() })
        })
        .collect()
}

/// Timestep embedding: sinusoidal features followed by a learned linear projection.
#[derive(Clone, Debug)]
pub struct TimeEmbedding<S> {
    pub proj: Linear<S>,
    steps: usize,
}

impl<S: Scalar> TimeEmbedding<S> {
    pub fn new<R: Rng + ?Sized>(dim: usize, steps: usize, rng: &mut R) -> Self {
        Self { proj: Linear::new(dim, dim, rng), steps }
    }

    pub fn dim(&self) -> usize {
        self.proj.output_dim()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn features(&self, ts: &[usize]) -> Result<Tensor<S>> {
        let d = self.dim();
        let mut data = Vec::with_capacity(ts.len() * d);
        for &t in ts {
            if t == 0 || t > self.steps {
                return Err(PdmError::IndexOutOfRange { t, max: self.steps });
            }
            data.extend(sinusoidal::<S>(t as f64, d));
        }
        Tensor::from_vec(&[ts.len(), d], data)
    }

    /// `gamma(t)` for each step in `ts`, as an `[N, D]` batch. The returned
    /// features are needed by [`TimeEmbedding::backward`].
    pub fn forward(&self, ts: &[usize]) -> Result<(Tensor<S>, Tensor<S>)> {
        let feats = self.features(ts)?;
        Ok((self.proj.forward(&feats)?, feats))
    }

    pub fn embed(&self, t: usize) -> Result<Vec<S>> {
        Ok(self.forward(&[t])?.0.into_vec())
    }

    pub fn backward(&mut self, feats: &Tensor<S>, d_out: &Tensor<S>) {
        self.proj.backward(feats, d_out);
    }
}

impl<S: Scalar> Module<S> for TimeEmbedding<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        self.proj.visit(&join(prefix, "linear"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.proj.visit_mut(&join(prefix, "linear"), f);
    }
}
