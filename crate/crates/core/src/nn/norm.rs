use crate::error::{PdmError, Result};
use crate::scalar::Scalar;
use crate::tensor::{join, Module, Param, Tensor};

/// Channels per normalization group.
pub const GROUP_SIZE: usize = 8;
const EPS: f64 = 1e-5;

/// Group normalization over `[N, C, H, W]` with a learned per-channel affine map.
///
/// Channels are split into groups of [`GROUP_SIZE`]; widths that are not a
/// multiple of it are normalized as a single group.
#[derive(Clone, Debug)]
pub struct GroupNorm<S> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
    groups: usize,
}

#[derive(Debug)]
pub struct NormCache<S> {
    xhat: Tensor<S>,
    inv_std: Vec<S>,
}

impl<S: Scalar> GroupNorm<S> {
    pub fn new(channels: usize) -> Self {
        let groups = if channels >= GROUP_SIZE && channels.is_multiple_of(GROUP_SIZE) { channels / GROUP_SIZE } else { 1 };
        Self {
            gamma: Param::new(Tensor::full(&[channels], S::one())),
            beta: Param::zeros(&[channels]),
            groups,
        }
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, NormCache<S>)> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.gamma.value.len() {
            return Err(PdmError::DimensionMismatch { expected: self.gamma.value.len(), got: c });
        }
        let span = (c / self.groups) * h * w;
        let m = S::of(span as f64);
        let eps = S::of(EPS);
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(n * self.groups);
        for chunk in xhat.data_mut().chunks_mut(span) {
            let mean = chunk.iter().copied().sum::<S>() / m;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / m;
            let is = S::one() / (var + eps).sqrt();
            chunk.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let hw = h * w;
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        let mut y = xhat.clone();
        for (chunk, idx) in y.data_mut().chunks_mut(hw).zip(0..) {
            let ch = idx % c;
            chunk.iter_mut().for_each(|v| *v = *v * g[ch] + b[ch]);
        }
        Ok((y, NormCache { xhat, inv_std }))
    }

    pub fn backward(&mut self, cache: &NormCache<S>, dy: &Tensor<S>) -> Tensor<S> {
        let (_, c, h, w) = dy.dims4().expect("cached forward was rank 4");
        let hw = h * w;
        let span = (c / self.groups) * hw;
        let g = self.gamma.value.data().to_vec();
        let mut dxhat = dy.clone();
        {
            let (dg, db) = (self.gamma.grad.data_mut(), self.beta.grad.data_mut());
            for ((d, xh), idx) in dxhat.data_mut().chunks_mut(hw).zip(cache.xhat.data().chunks(hw)).zip(0..) {
                let ch = idx % c;
                for (dv, &xv) in d.iter_mut().zip(xh) {
                    dg[ch] += *dv * xv;
                    db[ch] += *dv;
                    *dv *= g[ch];
                }
            }
        }
        let m = S::of(span as f64);
        for ((d, xh), &is) in dxhat.data_mut().chunks_mut(span).zip(cache.xhat.data().chunks(span)).zip(&cache.inv_std) {
            let mean_d = d.iter().copied().sum::<S>() / m;
            let mean_dx = d.iter().zip(xh).map(|(&a, &b)| a * b).sum::<S>() / m;
            for (dv, &xv) in d.iter_mut().zip(xh) {
                *dv = is * (*dv - mean_d - xv * mean_dx);
            }
        }
        dxhat
    }
}

impl<S: Scalar> Module<S> for GroupNorm<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}
