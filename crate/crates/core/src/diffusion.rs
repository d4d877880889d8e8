//! Closed-form forward noising and the single ancestral reverse update.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{PdmError, Result};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Noised image together with the step and noise that produced it.
#[derive(Clone, Debug)]
pub struct NoisedSample<S> {
    pub x_t: Tensor<S>,
    pub t: usize,
    pub eps: Tensor<S>,
}

fn same_shape<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    b.expect_shape(a.shape())
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_sample<S: Scalar>(
    x0: &Tensor<S>,
    t: usize,
    eps: &Tensor<S>,
    schedule: &NoiseSchedule,
) -> Result<NoisedSample<S>> {
    same_shape(x0, eps)?;
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (S::of(ab.sqrt()), S::of((1.0 - ab).sqrt()));
    let data = x0.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + b * e).collect();
    Ok(NoisedSample { x_t: Tensor::from_vec(x0.shape(), data)?, t, eps: eps.clone() })
}

/// Applies `t` single-step transitions `x_s = sqrt(1 - beta_s) x_{s-1} + sqrt(beta_s) z_s`.
///
/// Only meant as a reference for the closed-form marginal; `t = 0` returns `x0`.
pub fn forward_chain<S: Scalar, R: Rng + ?Sized>(
    x0: &Tensor<S>,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<S>> {
    if t > schedule.steps() {
        return Err(PdmError::IndexOutOfRange { t, max: schedule.steps() });
    }
    let mut x = x0.clone();
    for s in 1..=t {
        let beta = schedule.beta(s)?;
        let (keep, noise) = (S::of((1.0 - beta).sqrt()), S::of(beta.sqrt()));
        for v in x.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v = keep * *v + noise * S::of(z);
        }
    }
    Ok(x)
}

/// `x_{t-1} = (x_t - (1 - alpha_t) / sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_t) + sigma_t z`.
pub fn reverse_step<S: Scalar>(
    x_t: &Tensor<S>,
    eps_hat: &Tensor<S>,
    t: usize,
    z: &Tensor<S>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<S>> {
    same_shape(x_t, eps_hat)?;
    same_shape(x_t, z)?;
    let coeffs = ReverseCoeffs::at(schedule, t)?;
    let mut out = x_t.clone();
    coeffs.apply(out.data_mut(), eps_hat.data(), z.data());
    Ok(out)
}

/// Per-step scalars of the reverse update, precomputed once per `t`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ReverseCoeffs<S> {
    inv_sqrt_alpha: S,
    eps_coef: S,
    sigma: S,
}

impl<S: Scalar> ReverseCoeffs<S> {
    pub(crate) fn at(schedule: &NoiseSchedule, t: usize) -> Result<Self> {
        let alpha = schedule.alpha(t)?;
        let alpha_bar = schedule.alpha_bar(t)?;
        Ok(Self {
            inv_sqrt_alpha: S::of(1.0 / alpha.sqrt()),
            eps_coef: S::of(schedule.beta(t)? / (1.0 - alpha_bar).sqrt()),
            sigma: S::of(schedule.sigma(t)?),
        })
    }

    /// In-place update of `x` (holding `x_t`) to `x_{t-1}`.
    pub(crate) fn apply(&self, x: &mut [S], eps_hat: &[S], z: &[S]) {
        for ((v, &e), &zz) in x.iter_mut().zip(eps_hat).zip(z) {
            *v = self.inv_sqrt_alpha * (*v - self.eps_coef * e) + self.sigma * zz;
        }
    }
}

/// Inverts the forward equation: `(x_t - sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_bar_t)`.
pub fn reconstruct_x0<S: Scalar>(
    x_t: &Tensor<S>,
    eps: &Tensor<S>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor<S>> {
    same_shape(x_t, eps)?;
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (S::of(ab.sqrt()), S::of((1.0 - ab).sqrt()));
    let data = x_t.data().iter().zip(eps.data()).map(|(&x, &e)| (x - b * e) / a).collect();
    Tensor::from_vec(x_t.shape(), data)
}
