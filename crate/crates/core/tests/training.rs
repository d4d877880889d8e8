mod common;

use common::tiny_config;
use pdm_core::config::{RunConfig, Variant};
use pdm_core::data::{synth_two_mode, Dataset};
use pdm_core::training::{train, train_step, training_rng, LossReport, ModelState};
use pdm_core::PdmError;

fn data() -> Dataset<f64> {
    synth_two_mode(8, 8, 3).unwrap()
}

fn run(config: &RunConfig, dataset: &Dataset<f64>) -> (ModelState<f64>, Vec<LossReport>) {
    train(dataset, config, |_, _, _| Ok(())).unwrap()
}

fn short(variant: Variant, k: usize) -> RunConfig {
    let mut c = tiny_config(variant, k, 11);
    c.batch_size = 4;
    c.max_steps = 5;
    c
}

fn values(state: &ModelState<f64>) -> Vec<u64> {
    let mut out = Vec::new();
    state.visit_params(&mut |_, p| out.extend(p.value.data().iter().map(|v| v.to_bits())));
    out
}

#[test]
fn same_seed_gives_bit_identical_curves() {
    for variant in [Variant::Pdm, Variant::SPdm, Variant::Ddpm] {
        let c = short(variant, 2);
        let (a, ca) = run(&c, &data());
        let (b, cb) = run(&c, &data());
        assert_eq!(ca.len(), 5);
        for (x, y) in ca.iter().zip(&cb) {
            for (u, v) in [(x.diff, y.diff), (x.contrastive, y.contrastive), (x.align, y.align), (x.compact, y.compact), (x.total, y.total)] {
                assert_eq!(u.to_bits(), v.to_bits(), "{variant:?}");
            }
        }
        assert_eq!(values(&a), values(&b));
    }
}

#[test]
fn different_seed_changes_the_run() {
    let c = short(Variant::Pdm, 2);
    let mut d = c.clone();
    d.seed = 12;
    let (a, _) = run(&c, &data());
    let (b, _) = run(&d, &data());
    assert_ne!(values(&a), values(&b));
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let mut c = short(Variant::Pdm, 2);
    c.lr = 0.0;
    let init = ModelState::<f64>::new(&c, [1, 8, 8]).unwrap();
    let (trained, _) = run(&c, &data());
    assert_eq!(values(&init), values(&trained));
    assert_eq!(trained.step, 5);
}

#[test]
fn single_prototype_has_no_contrastive_or_compact_loss() {
    let (_, curve) = run(&short(Variant::Pdm, 1), &data());
    for r in &curve {
        assert_eq!(r.contrastive, 0.0);
        assert_eq!(r.compact, 0.0);
        assert!(r.diff > 0.0);
    }
}

#[test]
fn baseline_reports_only_the_denoising_term() {
    let (state, curve) = run(&short(Variant::Ddpm, 2), &data());
    for r in &curve {
        assert_eq!((r.contrastive, r.align, r.compact), (0.0, 0.0, 0.0));
        assert_eq!(r.total, r.diff);
    }
    assert_eq!(state.counters.assign_calls, 0);
    assert_eq!(state.counters.compact_evals, 0);
}

#[test]
fn supervised_never_assigns_or_evaluates_compactness() {
    let (state, curve) = run(&short(Variant::SPdm, 2), &data());
    assert_eq!(state.counters.assign_calls, 0);
    assert_eq!(state.counters.compact_evals, 0);
    assert!(curve.iter().all(|r| r.compact == 0.0 && r.contrastive > 0.0));
}

#[test]
fn unsupervised_assigns_every_item() {
    let (state, _) = run(&short(Variant::Pdm, 2), &data());
    assert_eq!(state.counters.assign_calls, 5 * 4);
    assert_eq!(state.counters.compact_evals, 5);
}

#[test]
fn total_is_the_sum_of_terms() {
    for variant in [Variant::Pdm, Variant::SPdm, Variant::Ddpm] {
        let (_, curve) = run(&short(variant, 2), &data());
        for r in &curve {
            let sum = r.diff + r.contrastive + r.align + r.compact;
            assert!((r.total - sum).abs() <= 1e-12 * sum.abs().max(1.0), "{variant:?}: {} vs {sum}", r.total);
        }
    }
}

#[test]
fn variants_share_the_parameter_count() {
    let counts: Vec<usize> = [Variant::Pdm, Variant::SPdm, Variant::Ddpm]
        .into_iter()
        .map(|v| ModelState::<f64>::new(&short(v, 2), [1, 8, 8]).unwrap().param_count())
        .collect();
    assert_eq!(counts[0], counts[1]);
    assert_eq!(counts[0], counts[2]);
}

#[test]
fn max_steps_overrides_epochs() {
    let mut c = short(Variant::Pdm, 2);
    c.epochs = 1;
    c.max_steps = 7;
    let (state, curve) = run(&c, &data());
    assert_eq!(state.step, 7);
    assert_eq!(curve.len(), 7);
    assert_eq!(curve.last().unwrap().step, 6);

    c.max_steps = 0;
    c.epochs = 2;
    let (state, _) = run(&c, &data());
    assert_eq!(state.step, 4);
}

#[test]
fn supervised_rejects_unlabeled_data() {
    let mut d = data();
    d.labels = None;
    let c = short(Variant::SPdm, 2);
    assert!(matches!(train(&d, &c, |_, _, _| Ok(())), Err(PdmError::Config(_))));

    let mut state = ModelState::<f64>::new(&c, [1, 8, 8]).unwrap();
    let batch = d.batch(&[0, 1]).unwrap();
    assert!(train_step(&batch, &mut state, &mut training_rng(0)).is_err());
}

#[test]
fn supervised_needs_one_prototype_per_class() {
    let c = short(Variant::SPdm, 3);
    assert!(matches!(train(&data(), &c, |_, _, _| Ok(())), Err(PdmError::Config(_))));
}
