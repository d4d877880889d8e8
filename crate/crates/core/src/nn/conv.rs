use rand::Rng;

use crate::error::{PdmError, Result};
use crate::scalar::{matmul, matmul_at_acc, matmul_bt_acc, Scalar};
use crate::tensor::{join, Module, Param, Tensor};

/// 2-D convolution with square kernel, "same"-style padding of `kernel / 2`.
#[derive(Clone, Debug)]
pub struct Conv2d<S> {
    pub weight: Param<S>,
    pub bias: Param<S>,
    pub stride: usize,
}

#[derive(Debug)]
pub struct ConvCache<S> {
    cols: Vec<S>,
    in_shape: [usize; 4],
    out_hw: (usize, usize),
}

impl<S: Scalar> Conv2d<S> {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        Self {
            weight: Param::new(Tensor::randn(&[cout, cin, kernel, kernel], 1.0 / fan_in.sqrt(), rng)),
            bias: Param::zeros(&[cout]),
            stride,
        }
    }

    pub fn cin(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn cout(&self) -> usize {
        self.weight.value.shape()[0]
    }

    fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (k, s) = (self.kernel(), self.stride);
        let p = k / 2;
        ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1)
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, ConvCache<S>)> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.cin() {
            return Err(PdmError::DimensionMismatch { expected: self.cin(), got: c });
        }
        let (ho, wo) = self.out_hw(h, w);
        let (cout, ckk, p) = (self.cout(), c * self.kernel() * self.kernel(), ho * wo);
        let np = n * p;
        let cols = self.im2col(x, ho, wo);
        // one product over the whole batch: [cout, ckk] x [ckk, n*p]
        let mut flat = vec![S::zero(); cout * np];
        matmul(cout, ckk, np, self.weight.value.data(), &cols, &mut flat);
        let mut y = Tensor::zeros(&[n, cout, ho, wo]);
        let b = self.bias.value.data();
        for (co, row) in flat.chunks(np).enumerate() {
            for (i, src) in row.chunks(p).enumerate() {
                let dst = &mut y.data_mut()[(i * cout + co) * p..(i * cout + co + 1) * p];
                dst.iter_mut().zip(src).for_each(|(d, &v)| *d = v + b[co]);
            }
        }
        Ok((y, ConvCache { cols, in_shape: [n, c, h, w], out_hw: (ho, wo) }))
    }

    pub fn backward(&mut self, cache: &ConvCache<S>, dy: &Tensor<S>) -> Tensor<S> {
        let [n, c, h, w] = cache.in_shape;
        let (ho, wo) = cache.out_hw;
        let (cout, ckk, p) = (self.cout(), c * self.kernel() * self.kernel(), ho * wo);
        let np = n * p;
        let dyd = dy.data();

        let db = self.bias.grad.data_mut();
        for (chunk, idx) in dyd.chunks(p).zip(0..) {
            db[idx % cout] += chunk.iter().copied().sum::<S>();
        }

        // dy as [cout, n*p] to match the column layout
        let mut flat = vec![S::zero(); cout * np];
        for (co, row) in flat.chunks_mut(np).enumerate() {
            for (i, dst) in row.chunks_mut(p).enumerate() {
                dst.copy_from_slice(&dyd[(i * cout + co) * p..(i * cout + co + 1) * p]);
            }
        }
        // dW += dy (cout x np) * cols^T (np x ckk)
        matmul_bt_acc(cout, np, ckk, &flat, &cache.cols, self.weight.grad.data_mut());
        // dcols (ckk x np) = W^T (ckk x cout) * dy
        let mut dcols = vec![S::zero(); ckk * np];
        matmul_at_acc(ckk, cout, np, self.weight.value.data(), &flat, &mut dcols);
        self.col2im(&dcols, [n, c, h, w], ho, wo)
    }

    fn im2col(&self, x: &Tensor<S>, ho: usize, wo: usize) -> Vec<S> {
        let (n, c, h, w) = x.dims4().expect("rank checked by caller");
        let (k, s) = (self.kernel(), self.stride);
        let pad = (k / 2) as isize;
        let (p, np) = (ho * wo, n * ho * wo);
        let mut cols = vec![S::zero(); c * k * k * np];
        let xd = x.data();
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((ci * k + ki) * k + kj) * np;
                    let (lo, hi) = valid_range(kj, pad, s, w, wo);
                    for ni in 0..n {
                        let img = &xd[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                        let dst = &mut cols[row + ni * p..row + (ni + 1) * p];
                        for oy in 0..ho {
                            let iy = (oy * s) as isize + ki as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = &img[iy as usize * w..(iy as usize + 1) * w];
                            let out = &mut dst[oy * wo + lo..oy * wo + hi];
                            let start = lo * s + kj - pad as usize;
                            if s == 1 {
                                out.copy_from_slice(&src[start..start + out.len()]);
                            } else {
                                out.iter_mut().zip(src[start..].iter().step_by(s)).for_each(|(d, &v)| *d = v);
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[S], shape: [usize; 4], ho: usize, wo: usize) -> Tensor<S> {
        let [n, c, h, w] = shape;
        let (k, s) = (self.kernel(), self.stride);
        let pad = (k / 2) as isize;
        let (p, np) = (ho * wo, n * ho * wo);
        let mut dx = Tensor::zeros(&[n, c, h, w]);
        let dxd = dx.data_mut();
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((ci * k + ki) * k + kj) * np;
                    let (lo, hi) = valid_range(kj, pad, s, w, wo);
                    for ni in 0..n {
                        let img = &mut dxd[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                        let src = &dcols[row + ni * p..row + (ni + 1) * p];
                        for oy in 0..ho {
                            let iy = (oy * s) as isize + ki as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let vals = &src[oy * wo + lo..oy * wo + hi];
                            let row = &mut img[iy as usize * w + lo * s + kj - pad as usize..];
                            row.iter_mut().step_by(s).zip(vals).for_each(|(d, &v)| *d += v);
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Output columns `lo..hi` whose input column `ox * s + kj - pad` lies in `0..w`.
fn valid_range(kj: usize, pad: isize, s: usize, w: usize, wo: usize) -> (usize, usize) {
    let off = kj as isize - pad;
    let lo = if off < 0 { ((-off) as usize).div_ceil(s) } else { 0 };
    // largest ox with ox * s + off <= w - 1
    let hi = ((w as isize - 1 - off).max(-1) + 1) as usize;
    let hi = hi.div_ceil(s).min(wo);
    (lo.min(hi), hi)
}

impl<S: Scalar> Module<S> for Conv2d<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
