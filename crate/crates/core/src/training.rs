//! Joint training of the encoder, prototypes and denoiser.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, Variant};
use crate::data::{shuffled_indices, Batch, Dataset};
use crate::diffusion::forward_sample;
use crate::error::{PdmError, Result};
use crate::networks::{Encoder, TimeEmbedding, UNet, UNetConfig};
use crate::optim::Adam;
use crate::prototypes::{align_loss, assign, compact_loss, contrastive_loss, Assignment, PrototypeBank};
use crate::scalar::Scalar;
use crate::schedule::{linear_schedule, NoiseSchedule};
use crate::tensor::{Module, Param, Tensor};

/// Instrumentation for code paths that some variants must never take.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub assign_calls: u64,
    pub compact_evals: u64,
}

/// Networks, prototypes, schedule and optimizer state of one run.
#[derive(Clone, Debug)]
pub struct ModelState<S> {
    pub config: RunConfig,
    pub schedule: NoiseSchedule,
    /// `[C, H, W]` of the images this model was built for.
    pub image_shape: [usize; 3],
    pub encoder: Encoder<S>,
    pub unet: UNet<S>,
    pub time: TimeEmbedding<S>,
    pub bank: PrototypeBank<S>,
    pub optimizer: Adam<S>,
    pub step: u64,
    pub counters: Counters,
}

/// Per-step loss breakdown; `total` is the sum of the active terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    /// Updates applied before this loss was measured.
    pub step: u64,
    pub diff: f64,
    pub contrastive: f64,
    pub align: f64,
    pub compact: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,diff,contrastive,align,compact,total";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.step, self.diff, self.contrastive, self.align, self.compact, self.total)
    }
}

/// Which loss terms contribute gradients; inactive terms report 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerms {
    pub diff: bool,
    pub contrastive: bool,
    pub align: bool,
    pub compact: bool,
}

impl LossTerms {
    pub const ALL: LossTerms = LossTerms { diff: true, contrastive: true, align: true, compact: true };

    pub fn only_diff() -> Self {
        LossTerms { diff: true, contrastive: false, align: false, compact: false }
    }
}

/// Randomness consumed by one step, fixed up front so a step is a pure
/// function of parameters and inputs.
#[derive(Clone, Debug)]
pub struct StepNoise<S> {
    pub ts: Vec<usize>,
    pub eps: Tensor<S>,
}

impl<S: Scalar> StepNoise<S> {
    /// Draws `t ~ U{1..T}` then `eps ~ N(0, I)` for each item in turn.
    pub fn draw<R: Rng + ?Sized>(n: usize, item_shape: &[usize], steps: usize, rng: &mut R) -> Self {
        let per: usize = item_shape.iter().product();
        let mut ts = Vec::with_capacity(n);
        let mut eps = Vec::with_capacity(n * per);
        for _ in 0..n {
            ts.push(rng.random_range(1..=steps));
            eps.extend(Tensor::<S>::randn(&[per], 1.0, rng).into_vec());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(item_shape);
        Self { ts, eps: Tensor::from_vec(&shape, eps).expect("sized from shape") }
    }
}

/// Prototype bound to `label` (supervised variant); no distance computation.
pub fn supervised_select<S: Scalar>(label: usize, bank: &PrototypeBank<S>) -> Result<&[S]> {
    let labels = bank.labels.as_ref().ok_or(PdmError::UnknownLabel(label))?;
    let k = labels.iter().position(|&l| l == label).ok_or(PdmError::UnknownLabel(label))?;
    Ok(bank.get(k))
}

fn supervised_index<S: Scalar>(label: usize, bank: &PrototypeBank<S>) -> Result<usize> {
    let labels = bank.labels.as_ref().ok_or(PdmError::UnknownLabel(label))?;
    labels.iter().position(|&l| l == label).ok_or(PdmError::UnknownLabel(label))
}

impl<S: Scalar> ModelState<S> {
    /// Fresh parameters for `config` and images of `image_shape`.
    pub fn new(config: &RunConfig, image_shape: [usize; 3]) -> Result<Self> {
        config.validate()?;
        let channels = image_shape[0];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let schedule = linear_schedule(config.steps, config.beta_start, config.beta_end)?;
        let encoder = Encoder::new(channels, config.encoder_widths, config.dim, &mut rng);
        let unet = UNet::new(
            UNetConfig {
                channels,
                widths: config.widths,
                res_blocks: config.res_blocks,
                cond_dim: config.dim,
                heads: config.heads,
            },
            &mut rng,
        )?;
        let time = TimeEmbedding::new(config.dim, config.steps, &mut rng);
        let mut bank = PrototypeBank::random(config.k, config.dim, &mut rng)?;
        if config.variant == Variant::SPdm {
            bank = bank.with_identity_labels();
        }
        Ok(Self {
            config: config.clone(),
            schedule,
            image_shape,
            encoder,
            unet,
            time,
            bank,
            optimizer: Adam::new(config.lr),
            step: 0,
            counters: Counters::default(),
        })
    }

    pub fn channels(&self) -> usize {
        self.unet.config.channels
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Visits every learnable parameter with its checkpoint name.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Param<S>)) {
        self.encoder.visit("encoder", f);
        self.unet.visit("unet", f);
        self.time.visit("time_proj", f);
        self.bank.visit("prototypes", f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.encoder.visit_mut("encoder", f);
        self.unet.visit_mut("unet", f);
        self.time.visit_mut("time_proj", f);
        self.bank.visit_mut("prototypes", f);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.value.len());
        n
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }

    /// Encoder features for a batch of clean images, `[N, D]`.
    pub fn features(&self, images: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.encoder.forward(images)?.0)
    }

    /// Chooses the conditioning prototype index of each item.
    fn select(&mut self, feats: &Tensor<S>, labels: Option<&[usize]>) -> Result<Vec<Assignment<S>>> {
        let n = feats.shape()[0];
        match self.config.variant {
            Variant::Pdm => (0..n)
                .map(|i| {
                    self.counters.assign_calls += 1;
                    assign(feats.item(i), &self.bank)
                })
                .collect(),
            Variant::SPdm => {
                let labels = labels.ok_or_else(|| PdmError::Data("supervised variant needs labeled data".into()))?;
                labels
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| {
                        let index = supervised_index(l, &self.bank)?;
                        let distance_sq = crate::prototypes::sq_dist(feats.item(i), self.bank.get(index));
                        Ok(Assignment { index, distance_sq })
                    })
                    .collect()
            }
            Variant::Ddpm => Ok(Vec::new()),
        }
    }

    /// Conditioning vectors `e_x + gamma(t)` (or `gamma(t)` alone for the baseline).
    pub fn conditioning(&self, protos: Option<&[usize]>, ts: &[usize]) -> Result<(Tensor<S>, Tensor<S>)> {
        let (mut cond, feats) = self.time.forward(ts)?;
        if let Some(idx) = protos {
            for (i, &k) in idx.iter().enumerate() {
                cond.item_mut(i).iter_mut().zip(self.bank.get(k)).for_each(|(c, &e)| *c += e);
            }
        }
        Ok((cond, feats))
    }

    /// Evaluates the batch-mean losses and accumulates their gradients into
    /// the parameters, without updating them.
    pub fn accumulate_gradients(&mut self, batch: &Batch<S>, noise: &StepNoise<S>, terms: LossTerms) -> Result<LossReport> {
        let images = &batch.images;
        let (n, c, h, w) = images.dims4()?;
        if n == 0 {
            return Err(PdmError::Data("empty batch".into()));
        }
        noise.eps.expect_shape(images.shape())?;
        if noise.ts.len() != n {
            return Err(PdmError::DimensionMismatch { expected: n, got: noise.ts.len() });
        }
        let variant = self.config.variant;
        let uses_protos = variant != Variant::Ddpm;
        let inv_b = S::one() / S::of(n as f64);
        let tau = S::of(self.config.tau);

        let (feats, enc_cache) = if uses_protos {
            let (f, cache) = self.encoder.forward(images)?;
            (Some(f), Some(cache))
        } else {
            (None, None)
        };
        let assignments = match &feats {
            Some(f) => self.select(f, batch.labels.as_deref())?,
            None => Vec::new(),
        };
        let proto_idx: Vec<usize> = assignments.iter().map(|a| a.index).collect();

        let per = c * h * w;
        let mut x_t = Tensor::zeros(images.shape());
        for i in 0..n {
            let x0 = Tensor::from_vec(&[per], images.item(i).to_vec())?;
            let eps = Tensor::from_vec(&[per], noise.eps.item(i).to_vec())?;
            let s = forward_sample(&x0, noise.ts[i], &eps, &self.schedule)?;
            x_t.item_mut(i).copy_from_slice(s.x_t.data());
        }
        let (cond, time_feats) = self.conditioning(uses_protos.then_some(proto_idx.as_slice()), &noise.ts)?;
        let (eps_hat, unet_cache) = self.unet.forward(&x_t, &cond)?;

        let mut report = LossReport { step: self.step, diff: 0.0, contrastive: 0.0, align: 0.0, compact: 0.0, total: 0.0 };

        let mut d_feats = feats.as_ref().map(|f| Tensor::zeros(f.shape()));
        let d = self.bank.d();
        let mut d_bank = vec![S::zero(); self.bank.k() * d];

        // diffusion term: mean over items of ||eps - eps_hat||^2
        let mut diff = S::zero();
        let mut d_eps_hat = Tensor::zeros(eps_hat.shape());
        for ((g, &p), &e) in d_eps_hat.data_mut().iter_mut().zip(eps_hat.data()).zip(noise.eps.data()) {
            let r = p - e;
            diff += r * r;
            *g = S::of(2.0) * r * inv_b;
        }
        report.diff = (diff * inv_b).as_f64();

        if let (Some(f), Some(df)) = (&feats, &mut d_feats) {
            if terms.contrastive {
                let mut total = S::zero();
                for (i, a) in assignments.iter().enumerate() {
                    let g = contrastive_loss(f.item(i), a, &self.bank, tau)?;
                    total += g.value;
                    df.item_mut(i).iter_mut().zip(&g.d_features).for_each(|(x, &y)| *x += y * inv_b);
                    d_bank.iter_mut().zip(&g.d_prototypes).for_each(|(x, &y)| *x += y * inv_b);
                }
                report.contrastive = (total * inv_b).as_f64();
            }
            if terms.align {
                let mut total = S::zero();
                for (i, a) in assignments.iter().enumerate() {
                    let g = align_loss(f.item(i), self.bank.get(a.index))?;
                    total += g.value;
                    df.item_mut(i).iter_mut().zip(&g.d_features).for_each(|(x, &y)| *x += y * inv_b);
                    d_bank[a.index * d..(a.index + 1) * d]
                        .iter_mut()
                        .zip(&g.d_prototypes)
                        .for_each(|(x, &y)| *x += y * inv_b);
                }
                report.align = (total * inv_b).as_f64();
            }
            if terms.compact && variant == Variant::Pdm {
                self.counters.compact_evals += 1;
                let g = compact_loss(&self.bank, S::of(self.config.beta_compact))?;
                report.compact = g.value.as_f64();
                d_bank.iter_mut().zip(&g.d_prototypes).for_each(|(x, &y)| *x += y);
            }
        }
        if !terms.diff {
            report.diff = 0.0;
        }
        report.total = report.diff + report.contrastive + report.align + report.compact;
        if !report.total.is_finite() {
            return Err(PdmError::Numeric(format!("non-finite loss at step {}: {report:?}", self.step)));
        }

        if terms.diff {
            let (_, d_cond) = self.unet.backward(&unet_cache, &d_eps_hat);
            self.time.backward(&time_feats, &d_cond);
            for (i, &k) in proto_idx.iter().enumerate() {
                d_bank[k * d..(k + 1) * d].iter_mut().zip(d_cond.item(i)).for_each(|(x, &y)| *x += y);
            }
        }
        self.bank.vectors.grad.data_mut().iter_mut().zip(&d_bank).for_each(|(g, &v)| *g += v);
        if let (Some(cache), Some(df)) = (&enc_cache, &d_feats) {
            self.encoder.backward(cache, df);
        }
        Ok(report)
    }

    /// One Adam update over every parameter from the accumulated gradients.
    pub fn apply_gradients(&mut self) {
        let mut opt = std::mem::replace(&mut self.optimizer, Adam::new(0.0));
        {
            let mut step = opt.begin_step();
            self.visit_params_mut(&mut |_, p| step.update(p));
        }
        self.optimizer = opt;
        self.step += 1;
    }
}

/// One training step on `batch`: draw per-item noise, accumulate gradients
/// of the variant's total loss, update all parameters jointly.
pub fn train_step<S: Scalar, R: Rng + ?Sized>(
    batch: &Batch<S>,
    state: &mut ModelState<S>,
    rng: &mut R,
) -> Result<LossReport> {
    let (n, c, h, w) = batch.images.dims4()?;
    if n == 0 {
        return Err(PdmError::Data("empty batch".into()));
    }
    if state.config.variant == Variant::SPdm && batch.labels.is_none() {
        return Err(PdmError::Data("supervised variant needs labeled data".into()));
    }
    let noise = StepNoise::draw(n, &[c, h, w], state.schedule.steps(), rng);
    state.zero_grad();
    let report = state.accumulate_gradients(batch, &noise, LossTerms::ALL)?;
    state.apply_gradients();
    Ok(report)
}

/// Seeded generator for the training loop, independent of initialization.
pub fn training_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Checks dataset/config compatibility before training starts.
pub fn check_dataset<S: Scalar>(dataset: &Dataset<S>, config: &RunConfig) -> Result<()> {
    if dataset.is_empty() {
        return Err(PdmError::Data("empty dataset".into()));
    }
    if config.variant == Variant::SPdm {
        if dataset.labels.is_none() {
            return Err(PdmError::Config("variant spdm requires a labeled dataset".into()));
        }
        if config.k != dataset.num_classes {
            return Err(PdmError::Config(format!(
                "variant spdm requires K = number of classes ({}), got K = {}",
                dataset.num_classes, config.k
            )));
        }
    }
    Ok(())
}

/// Runs shuffled passes over `dataset`, calling `on_step` after every update.
///
/// With `max_steps > 0` training stops after exactly that many updates,
/// running more than `epochs` passes if needed; otherwise it runs `epochs`
/// passes. Returns the final state and loss curve.
pub fn train<S: Scalar>(
    dataset: &Dataset<S>,
    config: &RunConfig,
    mut on_step: impl FnMut(&LossReport, &ModelState<S>, &ChaCha8Rng) -> Result<()>,
) -> Result<(ModelState<S>, Vec<LossReport>)> {
    check_dataset(dataset, config)?;
    let mut state = ModelState::new(config, dataset.shape)?;
    let mut rng = training_rng(config.seed);
    let mut curve = Vec::new();
    let mut epoch = 0;
    'outer: while epoch < config.epochs || (config.max_steps > 0 && (state.step as usize) < config.max_steps) {
        epoch += 1;
        let order = shuffled_indices(dataset.len(), &mut rng);
        for chunk in order.chunks(config.batch_size) {
            if config.max_steps > 0 && state.step as usize >= config.max_steps {
                break 'outer;
            }
            let batch = dataset.batch(chunk)?;
            let report = train_step(&batch, &mut state, &mut rng)?;
            on_step(&report, &state, &rng)?;
            curve.push(report);
        }
    }
    Ok((state, curve))
}
