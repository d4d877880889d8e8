#![allow(dead_code)]

use pdm_core::config::{RunConfig, Variant};
use pdm_core::diffusion::forward_sample;
use pdm_core::training::{ModelState, StepNoise};
use pdm_core::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-5;

/// Relative error with the denominator floored at the resolution of a
/// central difference of a function of magnitude `f_scale`.
///
/// Rounding in `f(x + h) - f(x - h)` leaves an absolute error of order
/// `eps * |f| / h` in the quotient; a gradient below that (divided by the
/// tolerance) is compared against the floor instead of its own size.
pub fn rel_err(analytic: f64, numeric: f64, f_scale: f64) -> f64 {
    let floor = 10.0 * f64::EPSILON * f_scale.abs().max(1.0) / FD_STEP / FD_REL_TOL;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
}

pub fn randn_vec<R: Rng>(n: usize, std: f64, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

/// Smallest configuration that exercises every layer type.
pub fn tiny_config(variant: Variant, k: usize, seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.variant = variant;
    c.steps = 10;
    c.beta_start = 1e-3;
    c.beta_end = 0.2;
    c.k = k;
    c.dim = 4;
    c.widths = [4, 4, 4, 4];
    c.encoder_widths = [3, 4, 4];
    c.res_blocks = 1;
    c.heads = 2;
    c.seed = seed;
    c
}

/// Adds noise to every parameter so zero biases and unit norms are not special.
pub fn jitter<R: Rng>(state: &mut ModelState<f64>, std: f64, rng: &mut R) {
    state.visit_params_mut(&mut |_, p| {
        for v in p.value.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += std * z;
        }
    });
}

pub fn param_names(state: &ModelState<f64>) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    state.visit_params(&mut |n, p| out.push((n.to_string(), p.value.len())));
    out
}

pub fn get_value(state: &ModelState<f64>, name: &str, i: usize) -> f64 {
    let mut v = None;
    state.visit_params(&mut |n, p| {
        if n == name {
            v = Some(p.value.data()[i]);
        }
    });
    v.expect("parameter exists")
}

pub fn get_grad(state: &ModelState<f64>, name: &str, i: usize) -> f64 {
    let mut v = None;
    state.visit_params(&mut |n, p| {
        if n == name {
            v = Some(p.grad.data()[i]);
        }
    });
    v.expect("parameter exists")
}

pub fn set_value(state: &mut ModelState<f64>, name: &str, i: usize, value: f64) {
    state.visit_params_mut(&mut |n, p| {
        if n == name {
            p.value.data_mut()[i] = value;
        }
    });
}

/// Batch-mean `||eps - eps_hat||^2` evaluated by plain forward passes with
/// the prototype choice held fixed.
pub fn diffusion_loss(state: &ModelState<f64>, x0: &Tensor<f64>, noise: &StepNoise<f64>, protos: Option<&[usize]>) -> f64 {
    let n = x0.shape()[0];
    let per = x0.len() / n;
    let mut x_t = Tensor::zeros(x0.shape());
    let mut cond = Tensor::zeros(&[n, state.bank.d()]);
    for i in 0..n {
        let a = Tensor::from_vec(&[per], x0.item(i).to_vec()).unwrap();
        let e = Tensor::from_vec(&[per], noise.eps.item(i).to_vec()).unwrap();
        x_t.item_mut(i).copy_from_slice(forward_sample(&a, noise.ts[i], &e, &state.schedule).unwrap().x_t.data());
        let mut c = state.time.embed(noise.ts[i]).unwrap();
        if let Some(p) = protos {
            c.iter_mut().zip(state.bank.get(p[i])).for_each(|(a, b)| *a += b);
        }
        cond.item_mut(i).copy_from_slice(&c);
    }
    let eps_hat = state.unet.predict(&x_t, &cond).unwrap();
    eps_hat.data().iter().zip(noise.eps.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `-log softmax(-tau * d^2)[a]`, summed naively.
pub fn naive_contrastive(x: &[f64], bank: &[Vec<f64>], a: usize, tau: f64) -> f64 {
    let z: f64 = bank.iter().map(|e| (-tau * sq_dist(x, e)).exp()).sum();
    -((-tau * sq_dist(x, &bank[a])).exp() / z).ln()
}

/// `beta * sum_{k != k'} cos(e_k, e_k')`.
pub fn naive_compact(bank: &[Vec<f64>], beta: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut s = 0.0;
    for (i, a) in bank.iter().enumerate() {
        for (j, b) in bank.iter().enumerate() {
            if i != j {
                s += a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b));
            }
        }
    }
    beta * s
}
