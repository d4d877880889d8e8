mod common;

use common::tiny_config;
use pdm_core::config::Variant;
use pdm_core::sampler::{generate, select_condition, Conditioning, SampleRequest};
use pdm_core::training::ModelState;
use pdm_core::{PdmError, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn state(variant: Variant, k: usize) -> ModelState<f64> {
    ModelState::new(&tiny_config(variant, k, 5), [1, 8, 8]).unwrap()
}

#[test]
fn samples_are_finite_and_clamped() {
    for variant in [Variant::Pdm, Variant::SPdm, Variant::Ddpm] {
        let s = state(variant, 2);
        let g = generate(&SampleRequest::new(3, Conditioning::Random, 1), &s).unwrap();
        assert_eq!(g.images.shape(), &[3, 1, 8, 8]);
        assert!(g.images.data().iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
        assert_eq!(g.prototypes.len(), 3);
        if variant == Variant::Ddpm {
            assert!(g.prototypes.iter().all(Option::is_none));
        } else {
            assert!(g.prototypes.iter().all(|p| p.is_some_and(|k| k < 2)));
        }
    }
}

#[test]
fn same_seed_same_images() {
    let s = state(Variant::Pdm, 3);
    let a = generate(&SampleRequest::new(4, Conditioning::Random, 9), &s).unwrap();
    let b = generate(&SampleRequest::new(4, Conditioning::Random, 9), &s).unwrap();
    let c = generate(&SampleRequest::new(4, Conditioning::Random, 10), &s).unwrap();
    assert_eq!(a.images.data(), b.images.data());
    assert_eq!(a.prototypes, b.prototypes);
    assert_ne!(a.images.data(), c.images.data());
}

#[test]
fn large_requests_span_chunks() {
    let s = state(Variant::Pdm, 2);
    let mut req = SampleRequest::new(70, Conditioning::Prototype(1), 4);
    req.steps_override = Some(2);
    let big = generate(&req, &s).unwrap();
    assert_eq!(big.images.shape()[0], 70);
    assert!(big.prototypes.iter().all(|&p| p == Some(1)));
}

#[test]
fn single_prototype_random_always_picks_it() {
    let s = state(Variant::Pdm, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let req = SampleRequest::new(1, Conditioning::Random, 0);
    for _ in 0..20 {
        let c = select_condition(&req, &s, &mut rng).unwrap();
        assert_eq!(c.index, Some(0));
        assert_eq!(c.vector, s.bank.get(0));
    }
}

#[test]
fn random_draw_covers_the_bank() {
    let s = state(Variant::Pdm, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let req = SampleRequest::new(1, Conditioning::Random, 0);
    let mut seen = [0usize; 4];
    for _ in 0..4000 {
        seen[select_condition(&req, &s, &mut rng).unwrap().index.unwrap()] += 1;
    }
    // binomial(4000, 1/4): sd ~ 27
    assert!(seen.iter().all(|&n| (n as f64 - 1000.0).abs() < 150.0), "{seen:?}");
}

#[test]
fn image_conditioning_uses_the_nearest_prototype() {
    let s = state(Variant::Pdm, 3);
    let img = Tensor::from_vec(&[1, 8, 8], (0..64).map(|i| (i as f64 / 32.0) - 1.0).collect()).unwrap();
    let feats = s.features(&img.clone().reshape(&[1, 1, 8, 8]).unwrap()).unwrap();
    let f = feats.item(0);
    let nearest = (0..3)
        .min_by(|&a, &b| {
            let d = |k: usize| s.bank.get(k).iter().zip(f).map(|(p, x)| (p - x) * (p - x)).sum::<f64>();
            d(a).total_cmp(&d(b))
        })
        .unwrap();
    let c = select_condition(&SampleRequest::new(1, Conditioning::Image(img), 0), &s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(c.index, Some(nearest));
}

#[test]
fn label_conditioning_is_supervised_only() {
    let sup = state(Variant::SPdm, 2);
    let c = select_condition(&SampleRequest::new(1, Conditioning::Label(1), 0), &sup, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(c.index, Some(1));
    assert_eq!(c.vector, sup.bank.get(1));
    assert!(matches!(
        generate(&SampleRequest::new(1, Conditioning::Label(2), 0), &sup),
        Err(PdmError::UnknownLabel(2))
    ));
    for variant in [Variant::Pdm, Variant::Ddpm] {
        let s = state(variant, 2);
        assert!(matches!(generate(&SampleRequest::new(1, Conditioning::Label(0), 0), &s), Err(PdmError::Config(_))));
    }
}

#[test]
fn bad_requests_are_rejected() {
    let s = state(Variant::Pdm, 2);
    assert!(generate(&SampleRequest::new(1, Conditioning::Prototype(2), 0), &s).is_err());
    assert!(generate(&SampleRequest::new(0, Conditioning::Random, 0), &s).is_err());
    let mut req = SampleRequest::new(1, Conditioning::Random, 0);
    req.steps_override = Some(11);
    assert!(matches!(generate(&req, &s), Err(PdmError::IndexOutOfRange { .. })));
    req.steps_override = Some(0);
    assert!(generate(&req, &s).is_err());
}
