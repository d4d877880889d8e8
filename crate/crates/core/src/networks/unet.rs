use rand::Rng;

use crate::error::{PdmError, Result};
use crate::nn::{
    concat_channels, silu, silu_backward, split_channels, upsample2, upsample2_backward, AttentionCache,
    Conv2d, ConvCache, CrossAttention, GroupNorm, NormCache,
};
use crate::scalar::Scalar;
use crate::tensor::{join, Module, Param, Tensor};

/// Stage widths of the full-size denoiser.
pub const PAPER_WIDTHS: [usize; 4] = [128, 256, 256, 256];
/// Scaled-down widths for desk-scale runs.
pub const DESK_WIDTHS: [usize; 4] = [16, 32, 32, 32];
pub const DEFAULT_RES_BLOCKS: usize = 2;

/// Shape hyperparameters of [`UNet`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    pub channels: usize,
    pub widths: [usize; 4],
    pub res_blocks: usize,
    pub cond_dim: usize,
    pub heads: usize,
}

/// Pre-activation residual block: `conv(silu(norm(conv(silu(norm(x)))))) + skip(x)`.
#[derive(Clone, Debug)]
pub struct ResBlock<S> {
    pub norm1: GroupNorm<S>,
    pub conv1: Conv2d<S>,
    pub norm2: GroupNorm<S>,
    pub conv2: Conv2d<S>,
    /// 1x1 projection when input and output widths differ.
    pub skip: Option<Conv2d<S>>,
}

#[derive(Debug)]
pub struct ResCache<S> {
    n1: NormCache<S>,
    a1: Tensor<S>,
    c1: ConvCache<S>,
    n2: NormCache<S>,
    a2: Tensor<S>,
    c2: ConvCache<S>,
    skip: Option<ConvCache<S>>,
}

impl<S: Scalar> ResBlock<S> {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            norm1: GroupNorm::new(cin),
            conv1: Conv2d::new(cin, cout, 3, 1, rng),
            norm2: GroupNorm::new(cout),
            conv2: Conv2d::new(cout, cout, 3, 1, rng),
            skip: (cin != cout).then(|| Conv2d::new(cin, cout, 1, 1, rng)),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, ResCache<S>)> {
        let (a1, n1) = self.norm1.forward(x)?;
        let (h1, c1) = self.conv1.forward(&silu(&a1))?;
        let (a2, n2) = self.norm2.forward(&h1)?;
        let (mut out, c2) = self.conv2.forward(&silu(&a2))?;
        let skip = match &self.skip {
            Some(conv) => {
                let (s, cache) = conv.forward(x)?;
                out.add_assign(&s);
                Some(cache)
            }
            None => {
                out.add_assign(x);
                None
            }
        };
        Ok((out, ResCache { n1, a1, c1, n2, a2, c2, skip }))
    }

    pub fn backward(&mut self, cache: &ResCache<S>, dy: &Tensor<S>) -> Tensor<S> {
        let g = self.conv2.backward(&cache.c2, dy);
        let g = silu_backward(&cache.a2, &g);
        let g = self.norm2.backward(&cache.n2, &g);
        let g = self.conv1.backward(&cache.c1, &g);
        let g = silu_backward(&cache.a1, &g);
        let mut dx = self.norm1.backward(&cache.n1, &g);
        match (&mut self.skip, &cache.skip) {
            (Some(conv), Some(sc)) => dx.add_assign(&conv.backward(sc, dy)),
            _ => dx.add_assign(dy),
        }
        dx
    }
}

impl<S: Scalar> Module<S> for ResBlock<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        if let Some(s) = &self.skip {
            s.visit(&join(prefix, "skip"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        if let Some(s) = &mut self.skip {
            s.visit_mut(&join(prefix, "skip"), f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct DownStage<S> {
    pub blocks: Vec<ResBlock<S>>,
    pub downsample: Option<Conv2d<S>>,
}

#[derive(Clone, Debug)]
pub struct UpStage<S> {
    pub blocks: Vec<ResBlock<S>>,
    /// Nearest-neighbour 2x upsample followed by this convolution.
    pub upsample: Option<Conv2d<S>>,
}

/// Noise-prediction U-Net with prototype cross-attention at the bottleneck.
///
/// Four stages; the first three end in a stride-2 downsample, so inputs must
/// have sides divisible by 8. Each stage output is kept as a skip tensor and
/// concatenated into the mirrored up stage.
#[derive(Clone, Debug)]
pub struct UNet<S> {
    pub config: UNetConfig,
    pub conv_in: Conv2d<S>,
    pub down: Vec<DownStage<S>>,
    pub mid1: ResBlock<S>,
    pub attn: CrossAttention<S>,
    pub mid2: ResBlock<S>,
    /// Ordered from the deepest stage to the shallowest.
    pub up: Vec<UpStage<S>>,
    pub out_norm: GroupNorm<S>,
    pub conv_out: Conv2d<S>,
}

#[derive(Debug)]
struct DownCache<S> {
    blocks: Vec<ResCache<S>>,
    downsample: Option<ConvCache<S>>,
}

#[derive(Debug)]
struct UpCache<S> {
    skip_channels: usize,
    blocks: Vec<ResCache<S>>,
    upsample: Option<ConvCache<S>>,
}

#[derive(Debug)]
pub struct UNetCache<S> {
    conv_in: ConvCache<S>,
    down: Vec<DownCache<S>>,
    mid1: ResCache<S>,
    /// Bottleneck attention cache (exposes the attention weights).
    pub attn: AttentionCache<S>,
    mid2: ResCache<S>,
    up: Vec<UpCache<S>>,
    out_norm: NormCache<S>,
    out_act: Tensor<S>,
    conv_out: ConvCache<S>,
}

const STAGES: usize = 4;

impl<S: Scalar> UNet<S> {
    pub fn new<R: Rng + ?Sized>(config: UNetConfig, rng: &mut R) -> Result<Self> {
        if config.res_blocks == 0 || config.widths.contains(&0) || config.channels == 0 || config.cond_dim == 0 {
            return Err(PdmError::Config(format!("degenerate denoiser configuration {config:?}")));
        }
        let w = config.widths;
        let conv_in = Conv2d::new(config.channels, w[0], 3, 1, rng);
        let mut down = Vec::with_capacity(STAGES);
        let mut prev = w[0];
        for (i, &wi) in w.iter().enumerate() {
            let blocks = (0..config.res_blocks)
                .map(|j| ResBlock::new(if j == 0 { prev } else { wi }, wi, rng))
                .collect();
            let downsample = (i + 1 < STAGES).then(|| Conv2d::new(wi, wi, 3, 2, rng));
            down.push(DownStage { blocks, downsample });
            prev = wi;
        }
        let mid1 = ResBlock::new(w[3], w[3], rng);
        let attn = CrossAttention::new(w[3], config.cond_dim, config.heads, rng)?;
        let mid2 = ResBlock::new(w[3], w[3], rng);
        let mut up = Vec::with_capacity(STAGES);
        for i in (0..STAGES).rev() {
            let blocks = (0..config.res_blocks)
                .map(|j| ResBlock::new(if j == 0 { 2 * w[i] } else { w[i] }, w[i], rng))
                .collect();
            let upsample = (i > 0).then(|| Conv2d::new(w[i], w[i - 1], 3, 1, rng));
            up.push(UpStage { blocks, upsample });
        }
        let out_norm = GroupNorm::new(w[0]);
        let conv_out = Conv2d::new(w[0], config.channels, 3, 1, rng);
        Ok(Self { config, conv_in, down, mid1, attn, mid2, up, out_norm, conv_out })
    }

    /// Predicts noise for `x_t` (`[N, C, H, W]`) under conditioning `cond` (`[N, D]`).
    pub fn forward(&self, x: &Tensor<S>, cond: &Tensor<S>) -> Result<(Tensor<S>, UNetCache<S>)> {
        let (n, c, h, w) = x.dims4()?;
        let factor = 1 << (STAGES - 1);
        if c != self.config.channels || h % factor != 0 || w % factor != 0 || h == 0 || w == 0 {
            return Err(PdmError::ShapeMismatch { expected: vec![n, self.config.channels, factor, factor], got: x.shape().to_vec() });
        }
        cond.expect_shape(&[n, self.config.cond_dim])?;

        let (mut hcur, conv_in) = self.conv_in.forward(x)?;
        let mut skips = Vec::with_capacity(STAGES);
        let mut down = Vec::with_capacity(STAGES);
        for stage in &self.down {
            let mut blocks = Vec::with_capacity(stage.blocks.len());
            for b in &stage.blocks {
                let (y, cache) = b.forward(&hcur)?;
                blocks.push(cache);
                hcur = y;
            }
            skips.push(hcur.clone());
            let downsample = match &stage.downsample {
                Some(conv) => {
                    let (y, cache) = conv.forward(&hcur)?;
                    hcur = y;
                    Some(cache)
                }
                None => None,
            };
            down.push(DownCache { blocks, downsample });
        }

        let (y, mid1) = self.mid1.forward(&hcur)?;
        let cond3 = cond.clone().reshape(&[n, 1, self.config.cond_dim])?;
        let (y, attn) = self.attn.forward(&y, &cond3)?;
        let (mut hcur, mid2) = self.mid2.forward(&y)?;

        let mut up = Vec::with_capacity(STAGES);
        for stage in &self.up {
            let skip = skips.pop().expect("one skip per stage");
            let skip_channels = hcur.shape()[1];
            hcur = concat_channels(&hcur, &skip);
            let mut blocks = Vec::with_capacity(stage.blocks.len());
            for b in &stage.blocks {
                let (y, cache) = b.forward(&hcur)?;
                blocks.push(cache);
                hcur = y;
            }
            let upsample = match &stage.upsample {
                Some(conv) => {
                    let (y, cache) = conv.forward(&upsample2(&hcur))?;
                    hcur = y;
                    Some(cache)
                }
                None => None,
            };
            up.push(UpCache { skip_channels, blocks, upsample });
        }

        let (out_act, out_norm) = self.out_norm.forward(&hcur)?;
        let (eps, conv_out) = self.conv_out.forward(&silu(&out_act))?;
        let cache = UNetCache { conv_in, down, mid1, attn, mid2, up, out_norm, out_act, conv_out };
        Ok((eps, cache))
    }

    /// Prediction only, discarding intermediate state.
    pub fn predict(&self, x: &Tensor<S>, cond: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.forward(x, cond)?.0)
    }

    /// Returns gradients with respect to the noisy input and the conditioning.
    pub fn backward(&mut self, cache: &UNetCache<S>, d_eps: &Tensor<S>) -> (Tensor<S>, Tensor<S>) {
        let g = self.conv_out.backward(&cache.conv_out, d_eps);
        let g = silu_backward(&cache.out_act, &g);
        let mut g = self.out_norm.backward(&cache.out_norm, &g);

        let mut skip_grads = Vec::with_capacity(STAGES);
        for (stage, sc) in self.up.iter_mut().zip(&cache.up).rev() {
            if let (Some(conv), Some(c)) = (&mut stage.upsample, &sc.upsample) {
                g = upsample2_backward(&conv.backward(c, &g));
            }
            for (b, bc) in stage.blocks.iter_mut().zip(&sc.blocks).rev() {
                g = b.backward(bc, &g);
            }
            let (dh, dskip) = split_channels(&g, sc.skip_channels);
            skip_grads.push(dskip);
            g = dh;
        }
        // up stages were walked shallow-first, so skip_grads[i] belongs to down stage i
        let g = self.mid2.backward(&cache.mid2, &g);
        let (g, dcond) = self.attn.backward(&cache.attn, &g);
        let mut g = self.mid1.backward(&cache.mid1, &g);

        for (i, (stage, dc)) in self.down.iter_mut().zip(&cache.down).enumerate().rev() {
            if let (Some(conv), Some(c)) = (&mut stage.downsample, &dc.downsample) {
                g = conv.backward(c, &g);
            }
            g.add_assign(&skip_grads[i]);
            for (b, bc) in stage.blocks.iter_mut().zip(&dc.blocks).rev() {
                g = b.backward(bc, &g);
            }
        }
        let dx = self.conv_in.backward(&cache.conv_in, &g);
        let n = dcond.shape()[0];
        let dcond = dcond.reshape(&[n, self.config.cond_dim]).expect("single conditioning token");
        (dx, dcond)
    }
}

impl<S: Scalar> Module<S> for UNet<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        self.conv_in.visit(&join(prefix, "conv_in"), f);
        for (i, stage) in self.down.iter().enumerate() {
            let p = join(prefix, &format!("down{i}"));
            for (j, b) in stage.blocks.iter().enumerate() {
                b.visit(&join(&p, &format!("res{j}")), f);
            }
            if let Some(d) = &stage.downsample {
                d.visit(&join(&p, "downsample"), f);
            }
        }
        self.mid1.visit(&join(prefix, "mid.res1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.mid2.visit(&join(prefix, "mid.res2"), f);
        for (k, stage) in self.up.iter().enumerate() {
            let p = join(prefix, &format!("up{}", STAGES - 1 - k));
            for (j, b) in stage.blocks.iter().enumerate() {
                b.visit(&join(&p, &format!("res{j}")), f);
            }
            if let Some(u) = &stage.upsample {
                u.visit(&join(&p, "upsample"), f);
            }
        }
        self.out_norm.visit(&join(prefix, "out_norm"), f);
        self.conv_out.visit(&join(prefix, "conv_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.conv_in.visit_mut(&join(prefix, "conv_in"), f);
        for (i, stage) in self.down.iter_mut().enumerate() {
            let p = join(prefix, &format!("down{i}"));
            for (j, b) in stage.blocks.iter_mut().enumerate() {
                b.visit_mut(&join(&p, &format!("res{j}")), f);
            }
            if let Some(d) = &mut stage.downsample {
                d.visit_mut(&join(&p, "downsample"), f);
            }
        }
        self.mid1.visit_mut(&join(prefix, "mid.res1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.mid2.visit_mut(&join(prefix, "mid.res2"), f);
        for (k, stage) in self.up.iter_mut().enumerate() {
            let p = join(prefix, &format!("up{}", STAGES - 1 - k));
            for (j, b) in stage.blocks.iter_mut().enumerate() {
                b.visit_mut(&join(&p, &format!("res{j}")), f);
            }
            if let Some(u) = &mut stage.upsample {
                u.visit_mut(&join(&p, "upsample"), f);
            }
        }
        self.out_norm.visit_mut(&join(prefix, "out_norm"), f);
        self.conv_out.visit_mut(&join(prefix, "conv_out"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(channels: usize) -> UNetConfig {
        UNetConfig { channels, widths: [4, 8, 8, 8], res_blocks: 1, cond_dim: 6, heads: 4 }
    }

    #[test]
    fn output_shape_matches_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = UNet::<f32>::new(tiny(3), &mut rng).unwrap();
        for side in [8, 16, 32] {
            let x = Tensor::randn(&[2, 3, side, side], 1.0, &mut rng);
            let cond = Tensor::randn(&[2, 6], 1.0, &mut rng);
            let y = net.predict(&x, &cond).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.all_finite());
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = UNet::<f32>::new(tiny(1), &mut rng).unwrap();
        let cond = Tensor::zeros(&[1, 6]);
        assert!(net.predict(&Tensor::zeros(&[1, 1, 12, 12]), &cond).is_err());
        assert!(net.predict(&Tensor::zeros(&[1, 2, 8, 8]), &cond).is_err());
        assert!(net.predict(&Tensor::zeros(&[1, 1, 8, 8]), &Tensor::zeros(&[1, 5])).is_err());
    }

    #[test]
    fn deterministic_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = UNet::<f32>::new(tiny(1), &mut rng).unwrap();
        let x = Tensor::randn(&[2, 1, 8, 8], 1.0, &mut rng);
        let cond = Tensor::randn(&[2, 6], 1.0, &mut rng);
        assert_eq!(net.predict(&x, &cond).unwrap(), net.predict(&x, &cond).unwrap());
    }

    #[test]
    fn parameter_names_are_unique() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = UNet::<f32>::new(tiny(1), &mut rng).unwrap();
        let mut names = Vec::new();
        net.visit("unet", &mut |n, _| names.push(n.to_string()));
        let before = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), before);
        assert!(names.iter().any(|n| n.starts_with("unet.attn.")));
        assert!(names.iter().any(|n| n.starts_with("unet.up0.")));
        assert!(names.iter().any(|n| n.starts_with("unet.down3.")));
    }
}
