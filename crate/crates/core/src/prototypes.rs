//! Learnable prototype bank, nearest-prototype assignment, and the three
//! prototype losses with their analytic gradients.
//!
//! Prototype indices are 0-based throughout the crate.

use rand::Rng;

use crate::error::{PdmError, Result};
use crate::scalar::Scalar;
use crate::tensor::{join, Module, Param, Tensor};

/// Standard deviation of the zero-mean normal used to initialize prototypes.
pub const PROTOTYPE_INIT_STD: f64 = 0.02;

/// `K` learnable `D`-dimensional vectors, stored as one `[K, D]` parameter.
#[derive(Clone, Debug)]
pub struct PrototypeBank<S> {
    pub vectors: Param<S>,
    /// Class bound to each prototype (supervised variant only).
    pub labels: Option<Vec<usize>>,
}

impl<S: Scalar> PrototypeBank<S> {
    pub fn random<R: Rng + ?Sized>(k: usize, d: usize, rng: &mut R) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(PdmError::InvalidRange(format!("prototype bank needs K, D >= 1, got {k}x{d}")));
        }
        Ok(Self { vectors: Param::new(Tensor::randn(&[k, d], PROTOTYPE_INIT_STD, rng)), labels: None })
    }

    pub fn from_vectors(vectors: Vec<Vec<S>>) -> Result<Self> {
        let k = vectors.len();
        let d = vectors.first().map_or(0, Vec::len);
        if k == 0 || d == 0 {
            return Err(PdmError::InvalidRange("prototype bank needs K, D >= 1".into()));
        }
        let mut flat = Vec::with_capacity(k * d);
        for v in &vectors {
            if v.len() != d {
                return Err(PdmError::DimensionMismatch { expected: d, got: v.len() });
            }
            flat.extend_from_slice(v);
        }
        Ok(Self { vectors: Param::new(Tensor::from_vec(&[k, d], flat)?), labels: None })
    }

    /// Binds prototype `k` to class `k`; requires one prototype per class.
    pub fn with_identity_labels(mut self) -> Self {
        self.labels = Some((0..self.k()).collect());
        self
    }

    pub fn k(&self) -> usize {
        self.vectors.value.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.vectors.value.shape()[1]
    }

    pub fn get(&self, k: usize) -> &[S] {
        let d = self.d();
        &self.vectors.value.data()[k * d..(k + 1) * d]
    }

    fn check_dim(&self, v: &[S]) -> Result<()> {
        if v.len() != self.d() {
            return Err(PdmError::DimensionMismatch { expected: self.d(), got: v.len() });
        }
        Ok(())
    }
}

impl<S: Scalar> Module<S> for PrototypeBank<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        f(&join(prefix, "vectors"), &self.vectors);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&join(prefix, "vectors"), &mut self.vectors);
    }
}

/// Chosen prototype and its squared distance to the feature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Assignment<S> {
    pub index: usize,
    pub distance_sq: S,
}

pub(crate) fn sq_dist<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Nearest prototype by Euclidean distance; ties go to the lowest index.
pub fn assign<S: Scalar>(x_hat: &[S], bank: &PrototypeBank<S>) -> Result<Assignment<S>> {
    bank.check_dim(x_hat)?;
    let mut best = Assignment { index: 0, distance_sq: sq_dist(x_hat, bank.get(0)) };
    for k in 1..bank.k() {
        let d = sq_dist(x_hat, bank.get(k));
        if d < best.distance_sq {
            best = Assignment { index: k, distance_sq: d };
        }
    }
    Ok(best)
}

/// Loss value with gradients to the feature and to prototypes.
///
/// `d_prototypes` is `K x D` for the contrastive and compactness losses and
/// `D` (the selected prototype only) for the alignment loss.
#[derive(Clone, Debug)]
pub struct LossGrad<S> {
    pub value: S,
    pub d_features: Vec<S>,
    pub d_prototypes: Vec<S>,
}

/// Softmax probabilities over `-tau * ||x - e_k||^2`.
pub fn soft_assignment<S: Scalar>(x_hat: &[S], bank: &PrototypeBank<S>, tau: S) -> Result<Vec<S>> {
    bank.check_dim(x_hat)?;
    let logits: Vec<S> = (0..bank.k()).map(|k| -tau * sq_dist(x_hat, bank.get(k))).collect();
    let m = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: S = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Negative log softmax weight of the assigned prototype under logits
/// `-tau * ||x - e_k||^2`.
pub fn contrastive_loss<S: Scalar>(
    x_hat: &[S],
    assignment: &Assignment<S>,
    bank: &PrototypeBank<S>,
    tau: S,
) -> Result<LossGrad<S>> {
    if !(tau > S::zero()) {
        return Err(PdmError::NonPositiveTau(tau.as_f64()));
    }
    bank.check_dim(x_hat)?;
    let (k_count, d) = (bank.k(), bank.d());
    if assignment.index >= k_count {
        return Err(PdmError::InvalidRange(format!("assignment {} >= K = {k_count}", assignment.index)));
    }
    let dists: Vec<S> = (0..k_count).map(|k| sq_dist(x_hat, bank.get(k))).collect();
    let logits: Vec<S> = dists.iter().map(|&dk| -tau * dk).collect();
    let m = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let z: S = logits.iter().map(|&l| (l - m).exp()).sum();
    let log_z = m + z.ln();
    let value = (log_z - logits[assignment.index]).max(S::zero());

    // dL/dd_k = tau * ([k == a] - p_k)
    let mut d_features = vec![S::zero(); d];
    let mut d_prototypes = vec![S::zero(); k_count * d];
    let two = S::of(2.0);
    for k in 0..k_count {
        let p = (logits[k] - log_z).exp();
        let ind = if k == assignment.index { S::one() } else { S::zero() };
        let g = tau * (ind - p);
        if g == S::zero() {
            continue;
        }
        let e = bank.get(k);
        for j in 0..d {
            let diff = two * (x_hat[j] - e[j]) * g;
            d_features[j] += diff;
            d_prototypes[k * d + j] -= diff;
        }
    }
    Ok(LossGrad { value, d_features, d_prototypes })
}

/// `||x_hat - e_x||^2`.
pub fn align_loss<S: Scalar>(x_hat: &[S], e_x: &[S]) -> Result<LossGrad<S>> {
    if x_hat.len() != e_x.len() {
        return Err(PdmError::DimensionMismatch { expected: x_hat.len(), got: e_x.len() });
    }
    let two = S::of(2.0);
    let d_features: Vec<S> = x_hat.iter().zip(e_x).map(|(&x, &e)| two * (x - e)).collect();
    let d_prototypes = d_features.iter().map(|&g| -g).collect();
    Ok(LossGrad { value: sq_dist(x_hat, e_x), d_features, d_prototypes })
}

/// `beta * sum over ordered pairs k != k' of cos(e_k, e_k')`.
///
/// Each unordered pair contributes twice.
pub fn compact_loss<S: Scalar>(bank: &PrototypeBank<S>, beta: S) -> Result<LossGrad<S>> {
    let (k_count, d) = (bank.k(), bank.d());
    let norms: Vec<S> = (0..k_count).map(|k| bank.get(k).iter().map(|&v| v * v).sum::<S>().sqrt()).collect();
    if let Some(k) = norms.iter().position(|n| !(*n > S::zero())) {
        return Err(PdmError::ZeroNormPrototype(k));
    }
    let mut value = S::zero();
    let mut grad = vec![S::zero(); k_count * d];
    let two = S::of(2.0);
    for a in 0..k_count {
        for b in (a + 1)..k_count {
            let (ea, eb) = (bank.get(a), bank.get(b));
            let dot: S = ea.iter().zip(eb).map(|(&x, &y)| x * y).sum();
            let nn = norms[a] * norms[b];
            let cos = dot / nn;
            value += two * cos;
            // d cos / d e_a = e_b / (|a||b|) - cos e_a / |a|^2
            for j in 0..d {
                grad[a * d + j] += two * beta * (eb[j] / nn - cos * ea[j] / (norms[a] * norms[a]));
                grad[b * d + j] += two * beta * (ea[j] / nn - cos * eb[j] / (norms[b] * norms[b]));
            }
        }
    }
    Ok(LossGrad { value: beta * value, d_features: Vec::new(), d_prototypes: grad })
}
