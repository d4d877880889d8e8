use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// `x * sigmoid(x)`; zero-preserving.
pub fn silu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| v * sigmoid(v))
}

pub fn silu_backward<S: Scalar>(x: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        let s = sigmoid(v);
        *d *= s + v * s * (S::one() - s);
    }
    dx
}

/// Nearest-neighbour 2x spatial upsampling.
pub fn upsample2<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (n, c, h, w) = x.dims4().expect("rank-4 input");
    let mut y = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let (xd, yd) = (x.data(), y.data_mut());
    for plane in 0..n * c {
        for iy in 0..2 * h {
            for ix in 0..2 * w {
                yd[(plane * 2 * h + iy) * 2 * w + ix] = xd[(plane * h + iy / 2) * w + ix / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<S: Scalar>(dy: &Tensor<S>) -> Tensor<S> {
    let (n, c, h2, w2) = dy.dims4().expect("rank-4 gradient");
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let (dyd, dxd) = (dy.data(), dx.data_mut());
    for plane in 0..n * c {
        for iy in 0..h2 {
            for ix in 0..w2 {
                dxd[(plane * h + iy / 2) * w + ix / 2] += dyd[(plane * h2 + iy) * w2 + ix];
            }
        }
    }
    dx
}

/// Channel-wise concatenation of two `[N, C?, H, W]` tensors.
pub fn concat_channels<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (n, ca, h, w) = a.dims4().expect("rank-4 input");
    let cb = b.shape()[1];
    let hw = h * w;
    let mut out = Vec::with_capacity(n * (ca + cb) * hw);
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * ca * hw..(i + 1) * ca * hw]);
        out.extend_from_slice(&b.data()[i * cb * hw..(i + 1) * cb * hw]);
    }
    Tensor::from_vec(&[n, ca + cb, h, w], out).expect("sizes derived from inputs")
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels<S: Scalar>(d: &Tensor<S>, ca: usize) -> (Tensor<S>, Tensor<S>) {
    let (n, c, h, w) = d.dims4().expect("rank-4 gradient");
    let (cb, hw) = (c - ca, h * w);
    let (mut da, mut db) = (Vec::with_capacity(n * ca * hw), Vec::with_capacity(n * cb * hw));
    for item in d.data().chunks(c * hw) {
        da.extend_from_slice(&item[..ca * hw]);
        db.extend_from_slice(&item[ca * hw..]);
    }
    (
        Tensor::from_vec(&[n, ca, h, w], da).expect("sizes derived from input"),
        Tensor::from_vec(&[n, cb, h, w], db).expect("sizes derived from input"),
    )
}
