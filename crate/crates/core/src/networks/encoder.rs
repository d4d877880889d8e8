use rand::Rng;

use crate::error::{PdmError, Result};
use crate::nn::{silu, silu_backward, Conv2d, ConvCache};
use crate::scalar::Scalar;
use crate::tensor::{Module, Param, Tensor};

/// Hidden widths of the first three encoder stages; the fourth outputs `D`.
pub const DEFAULT_ENCODER_WIDTHS: [usize; 3] = [32, 64, 128];
/// Smallest accepted spatial side.
pub const MIN_ENCODER_SIDE: usize = 8;

/// Feature extractor: four stride-2 3x3 convolutions (SiLU between them)
/// followed by global average pooling to a `D`-vector.
#[derive(Clone, Debug)]
pub struct Encoder<S> {
    pub convs: Vec<Conv2d<S>>,
}

#[derive(Debug)]
pub struct EncoderCache<S> {
    convs: Vec<ConvCache<S>>,
    pre_act: Vec<Tensor<S>>,
    last_shape: [usize; 4],
    input_shape: [usize; 4],
}

impl<S: Scalar> Encoder<S> {
    pub fn new<R: Rng + ?Sized>(channels: usize, hidden: [usize; 3], dim: usize, rng: &mut R) -> Self {
        let widths = [channels, hidden[0], hidden[1], hidden[2], dim];
        let convs = widths.windows(2).map(|w| Conv2d::new(w[0], w[1], 3, 2, rng)).collect();
        Self { convs }
    }

    pub fn dim(&self) -> usize {
        self.convs.last().map_or(0, Conv2d::cout)
    }

    pub fn channels(&self) -> usize {
        self.convs[0].cin()
    }

    /// `[N, C, H, W]` images to `[N, D]` features.
    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, EncoderCache<S>)> {
        let (n, c, h, w) = x.dims4()?;
        if h < MIN_ENCODER_SIDE || w < MIN_ENCODER_SIDE {
            return Err(PdmError::ShapeMismatch { expected: vec![n, c, MIN_ENCODER_SIDE, MIN_ENCODER_SIDE], got: x.shape().to_vec() });
        }
        let mut caches = Vec::with_capacity(self.convs.len());
        let mut pre_act = Vec::with_capacity(self.convs.len() - 1);
        let mut h_cur = x.clone();
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            let (y, cache) = conv.forward(&h_cur)?;
            caches.push(cache);
            h_cur = if i < last {
                let act = silu(&y);
                pre_act.push(y);
                act
            } else {
                y
            };
        }
        let (n, d, hh, ww) = h_cur.dims4()?;
        let p = S::of((hh * ww) as f64);
        let pooled: Vec<S> = h_cur.data().chunks(hh * ww).map(|ch| ch.iter().copied().sum::<S>() / p).collect();
        let cache = EncoderCache { convs: caches, pre_act, last_shape: [n, d, hh, ww], input_shape: [n, c, h, w] };
        Ok((Tensor::from_vec(&[n, d], pooled)?, cache))
    }

    pub fn backward(&mut self, cache: &EncoderCache<S>, d_out: &Tensor<S>) -> Tensor<S> {
        let [n, d, hh, ww] = cache.last_shape;
        let p = S::of((hh * ww) as f64);
        let mut g = Tensor::zeros(&[n, d, hh, ww]);
        for (chunk, &dv) in g.data_mut().chunks_mut(hh * ww).zip(d_out.data()) {
            chunk.iter_mut().for_each(|v| *v = dv / p);
        }
        for i in (0..self.convs.len()).rev() {
            if i < self.convs.len() - 1 {
                g = silu_backward(&cache.pre_act[i], &g);
            }
            g = self.convs[i].backward(&cache.convs[i], &g);
        }
        debug_assert_eq!(g.shape(), cache.input_shape);
        g
    }
}

impl<S: Scalar> Module<S> for Encoder<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        for (i, conv) in self.convs.iter().enumerate() {
            conv.visit(&format!("{prefix}.conv{}", i + 1), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            conv.visit_mut(&format!("{prefix}.conv{}", i + 1), f);
        }
    }
}
