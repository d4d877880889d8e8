use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{shuffled_indices, Dataset};
use crate::error::{PdmError, Result};
use crate::networks::Encoder;
use crate::nn::Linear;
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::tensor::{Module, Tensor};

/// Hidden widths of the proxy classifier body.
pub const EXTRACTOR_WIDTHS: [usize; 3] = [16, 32, 32];
/// Width of the penultimate (feature) layer.
pub const EXTRACTOR_FEATURES: usize = 32;
const EXTRACTOR_BATCH: usize = 32;
const EXTRACTOR_LR: f64 = 2e-3;
const CHUNK: usize = 128;

/// Small CNN classifier standing in for a pretrained Inception network.
///
/// The pooled encoder output is the feature vector; a linear head on top
/// gives class logits.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<S> {
    pub body: Encoder<S>,
    pub head: Linear<S>,
    pub shape: [usize; 3],
}

fn softmax_rows(logits: &[f64], classes: usize) -> Vec<Vec<f64>> {
    logits
        .chunks(classes)
        .map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

impl<S: Scalar> FeatureExtractor<S> {
    pub fn new<R: Rng + ?Sized>(shape: [usize; 3], classes: usize, rng: &mut R) -> Self {
        let body = Encoder::new(shape[0], EXTRACTOR_WIDTHS, EXTRACTOR_FEATURES, rng);
        let head = Linear::new(EXTRACTOR_FEATURES, classes, rng);
        Self { body, head, shape }
    }

    pub fn classes(&self) -> usize {
        self.head.output_dim()
    }

    /// Trains a fresh classifier on `dataset` against `labels` with softmax
    /// cross-entropy. Deterministic in `seed`.
    pub fn train(dataset: &Dataset<S>, labels: &[usize], classes: usize, steps: usize, seed: u64) -> Result<Self> {
        if labels.len() != dataset.len() {
            return Err(PdmError::DimensionMismatch { expected: dataset.len(), got: labels.len() });
        }
        if classes < 2 {
            return Err(PdmError::Data(format!("proxy classifier needs at least 2 classes, got {classes}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(PdmError::UnknownLabel(bad));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Self::new(dataset.shape, classes, &mut rng);
        let mut adam = Adam::<S>::new(EXTRACTOR_LR);
        let mut order = Vec::new();
        for _ in 0..steps {
            if order.len() < EXTRACTOR_BATCH.min(dataset.len()) {
                order = shuffled_indices(dataset.len(), &mut rng);
            }
            let idx: Vec<usize> = order.split_off(order.len() - EXTRACTOR_BATCH.min(order.len()));
            let batch = dataset.batch(&idx)?;
            let (feats, cache) = model.body.forward(&batch.images)?;
            let logits = model.head.forward(&feats)?;
            let n = idx.len();
            let probs = softmax_rows(&logits.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>(), classes);
            let mut dlogits = Tensor::zeros(&[n, classes]);
            for (i, (p, &j)) in probs.iter().zip(&idx).enumerate() {
                for c in 0..classes {
                    let target = if labels[j] == c { 1.0 } else { 0.0 };
                    dlogits.data_mut()[i * classes + c] = S::of((p[c] - target) / n as f64);
                }
            }
            let dfeat = model.head.backward(&feats, &dlogits);
            model.body.backward(&cache, &dfeat);
            let mut step = adam.begin_step();
            model.body.visit_mut("", &mut |_, p| step.update(p));
            model.head.visit_mut("", &mut |_, p| step.update(p));
        }
        Ok(model)
    }

    /// Features (`[N][F]`) and class probabilities (`[N][C]`) in `f64`.
    pub fn evaluate(&self, images: &[Vec<S>]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let classes = self.classes();
        let (mut feats, mut probs) = (Vec::with_capacity(images.len()), Vec::with_capacity(images.len()));
        for chunk in images.chunks(CHUNK) {
            let items: Vec<&[S]> = chunk.iter().map(Vec::as_slice).collect();
            let x = Tensor::stack(&items, &self.shape)?;
            let (f, _) = self.body.forward(&x)?;
            let logits = self.head.forward(&f)?;
            let fd: Vec<f64> = f.data().iter().map(|v| v.as_f64()).collect();
            feats.extend(fd.chunks(EXTRACTOR_FEATURES).map(<[f64]>::to_vec));
            probs.extend(softmax_rows(&logits.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>(), classes));
        }
        Ok((feats, probs))
    }

    /// Fraction of `images` whose argmax class equals the label.
    pub fn accuracy(&self, images: &[Vec<S>], labels: &[usize]) -> Result<f64> {
        let (_, probs) = self.evaluate(images)?;
        let hits = probs
            .iter()
            .zip(labels)
            .filter(|(p, &l)| p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i) == Some(l))
            .count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }
}
