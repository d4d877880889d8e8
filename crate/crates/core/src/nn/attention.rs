use rand::Rng;

use super::{GroupNorm, Linear, NormCache};
use crate::error::{PdmError, Result};
use crate::scalar::Scalar;
use crate::tensor::{join, Module, Param, Tensor};

pub const DEFAULT_HEADS: usize = 4;

/// Multi-head cross-attention from spatial queries to a set of conditioning tokens.
///
/// Queries come from the group-normalized feature map, keys and values from the
/// conditioning tokens; the projected result is added back to the input.
#[derive(Clone, Debug)]
pub struct CrossAttention<S> {
    pub norm: GroupNorm<S>,
    pub query: Linear<S>,
    pub key: Linear<S>,
    pub value: Linear<S>,
    pub out: Linear<S>,
    heads: usize,
}

#[derive(Debug)]
pub struct AttentionCache<S> {
    norm: NormCache<S>,
    tokens: Tensor<S>,
    cond: Tensor<S>,
    q: Tensor<S>,
    k: Tensor<S>,
    v: Tensor<S>,
    /// Softmax weights laid out `[N, heads, P, L]`.
    pub weights: Vec<S>,
    attended: Tensor<S>,
    dims: (usize, usize, usize, usize, usize),
}

fn to_tokens<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (n, c, h, w) = x.dims4().expect("rank-4 input");
    let p = h * w;
    let mut t = Tensor::zeros(&[n * p, c]);
    let (xd, td) = (x.data(), t.data_mut());
    for i in 0..n {
        for ch in 0..c {
            for pos in 0..p {
                td[(i * p + pos) * c + ch] = xd[(i * c + ch) * p + pos];
            }
        }
    }
    t
}

fn from_tokens<S: Scalar>(t: &Tensor<S>, n: usize, c: usize, h: usize, w: usize) -> Tensor<S> {
    let p = h * w;
    let mut x = Tensor::zeros(&[n, c, h, w]);
    let (td, xd) = (t.data(), x.data_mut());
    for i in 0..n {
        for ch in 0..c {
            for pos in 0..p {
                xd[(i * c + ch) * p + pos] = td[(i * p + pos) * c + ch];
            }
        }
    }
    x
}

impl<S: Scalar> CrossAttention<S> {
    pub fn new<R: Rng + ?Sized>(channels: usize, cond_dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(PdmError::Config(format!("{channels} channels not divisible into {heads} heads")));
        }
        Ok(Self {
            norm: GroupNorm::new(channels),
            query: Linear::new(channels, channels, rng),
            key: Linear::new(cond_dim, channels, rng),
            value: Linear::new(cond_dim, channels, rng),
            out: Linear::new(channels, channels, rng),
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// `x`: `[N, C, h, w]`; `cond`: `[N, L, D]` conditioning tokens.
    pub fn forward(&self, x: &Tensor<S>, cond: &Tensor<S>) -> Result<(Tensor<S>, AttentionCache<S>)> {
        let (n, c, h, w) = x.dims4()?;
        let (l, d) = match *cond.shape() {
            [cn, l, d] if cn == n => (l, d),
            _ => return Err(PdmError::ShapeMismatch { expected: vec![n, 1, self.key.input_dim()], got: cond.shape().to_vec() }),
        };
        let p = h * w;
        let (xn, norm) = self.norm.forward(x)?;
        let tokens = to_tokens(&xn);
        let q = self.query.forward(&tokens)?;
        let cond_flat = cond.clone().reshape(&[n * l, d])?;
        let k = self.key.forward(&cond_flat)?;
        let v = self.value.forward(&cond_flat)?;

        let (heads, dh) = (self.heads, c / self.heads);
        let scale = S::one() / S::of(dh as f64).sqrt();
        let mut weights = vec![S::zero(); n * heads * p * l];
        let mut attended = Tensor::zeros(&[n * p, c]);
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        let ad = attended.data_mut();
        let mut scores = vec![S::zero(); l];
        for i in 0..n {
            for hd in 0..heads {
                let off = hd * dh;
                for pos in 0..p {
                    let qrow = &qd[(i * p + pos) * c + off..][..dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let krow = &kd[(i * l + j) * c + off..][..dh];
                        *s = qrow.iter().zip(krow).map(|(&a, &b)| a * b).sum::<S>() * scale;
                    }
                    let m = scores.iter().copied().fold(S::neg_infinity(), S::max);
                    let z: S = scores.iter().map(|&s| (s - m).exp()).sum();
                    let wrow = &mut weights[((i * heads + hd) * p + pos) * l..][..l];
                    for (wv, &s) in wrow.iter_mut().zip(&scores) {
                        *wv = (s - m).exp() / z;
                    }
                    let arow = &mut ad[(i * p + pos) * c + off..][..dh];
                    for (j, &wv) in wrow.iter().enumerate() {
                        let vrow = &vd[(i * l + j) * c + off..][..dh];
                        arow.iter_mut().zip(vrow).for_each(|(a, &vv)| *a += wv * vv);
                    }
                }
            }
        }
        let projected = self.out.forward(&attended)?;
        let mut y = from_tokens(&projected, n, c, h, w);
        y.add_assign(x);
        let cache = AttentionCache {
            norm,
            tokens,
            cond: cond_flat,
            q,
            k,
            v,
            weights,
            attended,
            dims: (n, c, h, w, l),
        };
        Ok((y, cache))
    }

    /// Returns gradients to the input map and to the conditioning tokens.
    pub fn backward(&mut self, cache: &AttentionCache<S>, dy: &Tensor<S>) -> (Tensor<S>, Tensor<S>) {
        let (n, c, h, w, l) = cache.dims;
        let p = h * w;
        let (heads, dh) = (self.heads, c / self.heads);
        let scale = S::one() / S::of(dh as f64).sqrt();
        let d_proj = to_tokens(dy);
        let d_att = self.out.backward(&cache.attended, &d_proj);

        let mut dq = Tensor::zeros(cache.q.shape());
        let mut dk = Tensor::zeros(cache.k.shape());
        let mut dv = Tensor::zeros(cache.v.shape());
        let (qd, kd, vd, dad) = (cache.q.data(), cache.k.data(), cache.v.data(), d_att.data());
        let mut dw = vec![S::zero(); l];
        for i in 0..n {
            for hd in 0..heads {
                let off = hd * dh;
                for pos in 0..p {
                    let wrow = &cache.weights[((i * heads + hd) * p + pos) * l..][..l];
                    let darow = &dad[(i * p + pos) * c + off..][..dh];
                    for (j, g) in dw.iter_mut().enumerate() {
                        let vrow = &vd[(i * l + j) * c + off..][..dh];
                        *g = darow.iter().zip(vrow).map(|(&a, &b)| a * b).sum();
                        let dvrow = &mut dv.data_mut()[(i * l + j) * c + off..][..dh];
                        dvrow.iter_mut().zip(darow).for_each(|(d, &a)| *d += wrow[j] * a);
                    }
                    let wdw: S = wrow.iter().zip(&dw).map(|(&a, &b)| a * b).sum();
                    let qrow = &qd[(i * p + pos) * c + off..][..dh];
                    for j in 0..l {
                        let ds = wrow[j] * (dw[j] - wdw) * scale;
                        if ds == S::zero() {
                            continue;
                        }
                        let krow = &kd[(i * l + j) * c + off..][..dh];
                        let dqrow = &mut dq.data_mut()[(i * p + pos) * c + off..][..dh];
                        dqrow.iter_mut().zip(krow).for_each(|(d, &kk)| *d += ds * kk);
                        let dkrow = &mut dk.data_mut()[(i * l + j) * c + off..][..dh];
                        dkrow.iter_mut().zip(qrow).for_each(|(d, &qq)| *d += ds * qq);
                    }
                }
            }
        }
        let mut dcond = self.key.backward(&cache.cond, &dk);
        dcond.add_assign(&self.value.backward(&cache.cond, &dv));
        let d = dcond.shape()[1];
        let dcond = dcond.reshape(&[n, l, d]).expect("same element count");

        let d_tokens = self.query.backward(&cache.tokens, &dq);
        let d_norm = from_tokens(&d_tokens, n, c, h, w);
        let mut dx = self.norm.backward(&cache.norm, &d_norm);
        dx.add_assign(dy);
        (dx, dcond)
    }
}

impl<S: Scalar> Module<S> for CrossAttention<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}
