//! Monte-Carlo agreement of the step-by-step forward chain with the
//! closed-form marginal.

use pdm_core::diffusion::{forward_chain, forward_sample};
use pdm_core::schedule::{linear_schedule, NoiseSchedule};
use pdm_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const TRIALS: usize = 10_000;
const MAX_SE: f64 = 4.0;

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Fourth central moment, for the standard error of a sample variance.
fn m4(xs: &[f64], mean: f64) -> f64 {
    xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / xs.len() as f64
}

fn check_moments(schedule: &NoiseSchedule, x0: f64, t: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_vec(&[1], vec![x0]).unwrap();
    let chain: Vec<f64> = (0..TRIALS).map(|_| forward_chain(&x, t, schedule, &mut rng).unwrap().data()[0]).collect();
    let closed: Vec<f64> = (0..TRIALS)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            let eps = Tensor::from_vec(&[1], vec![z]).unwrap();
            forward_sample(&x, t, &eps, schedule).unwrap().x_t.data()[0]
        })
        .collect();
    let n = TRIALS as f64;
    let (m1, v1) = moments(&chain);
    let (m2, v2) = moments(&closed);

    let se_mean = (v1 / n + v2 / n).sqrt();
    assert!((m1 - m2).abs() < MAX_SE * se_mean, "t={t}: means {m1} vs {m2} (se {se_mean})");
    let se_var = ((m4(&chain, m1) - v1 * v1) / n + (m4(&closed, m2) - v2 * v2) / n).sqrt();
    assert!((v1 - v2).abs() < MAX_SE * se_var, "t={t}: variances {v1} vs {v2} (se {se_var})");

    // and the chain against the analytic marginal N(sqrt(ab) x0, 1 - ab)
    let ab = schedule.alpha_bar(t).unwrap();
    assert!((m1 - ab.sqrt() * x0).abs() < MAX_SE * (v1 / n).sqrt(), "t={t}: chain mean {m1}");
    let se_v = ((m4(&chain, m1) - v1 * v1) / n).sqrt();
    assert!((v1 - (1.0 - ab)).abs() < MAX_SE * se_v, "t={t}: chain variance {v1} vs {}", 1.0 - ab);
}

#[test]
fn chain_matches_closed_form_at_first_middle_last_step() {
    let s = linear_schedule(100, 1e-3, 0.2).unwrap();
    for (i, t) in [1, 50, 100].into_iter().enumerate() {
        check_moments(&s, 0.8, t, i as u64);
    }
}

#[test]
fn chain_matches_closed_form_on_default_schedule() {
    let s = NoiseSchedule::default();
    for (i, t) in [1, 500, 1000].into_iter().enumerate() {
        check_moments(&s, -0.6, t, 10 + i as u64);
    }
}
