use bittrace_core::nn::{LayerSpec, LossKind, Model, Trainer, TrainerConfig, Verdict};
use bittrace_core::{MatmulStrategy, PTensor, Precision};

const S: Precision = Precision::Single;

fn model(seed: u64) -> Model {
    let layers = [
        LayerSpec::Linear { inputs: 2, outputs: 4 },
        LayerSpec::Relu,
        LayerSpec::Linear { inputs: 4, outputs: 1 },
    ];
    Model::build(&layers, LossKind::Mse, S, MatmulStrategy::Rigorous, seed).unwrap()
}

fn batch() -> (PTensor, PTensor) {
    let x = PTensor::exact_literal(vec![0.5, -1.0, 1.0, 0.25, -0.75, 2.0], &[3, 2], S).unwrap();
    let y = PTensor::exact_literal(vec![1.0, 0.0, -1.0], &[3, 1], S).unwrap();
    (x, y)
}

fn snapshot(tr: &Trainer) -> Vec<PTensor> {
    let mut s = tr.model().param_values();
    s.extend(tr.optimizer().first_moments().iter().cloned());
    s.extend(tr.optimizer().second_moments().iter().cloned());
    s
}

#[test]
fn insignificant_loss_leaves_state_untouched() {
    let mut tr = Trainer::new(model(3), TrainerConfig::default()).unwrap();
    let (x, y) = batch();
    for _ in 0..5 {
        assert!(!tr.step(x.clone(), y.clone()).unwrap().record.skipped);
    }
    let before = snapshot(&tr);
    let t_before = tr.optimizer().step_count();
    // an input whose every element carries no exact bits
    let n = x.numel();
    let poisoned = x.clone().with_bits(vec![0; n]).unwrap();
    let out = tr.step(poisoned, y.clone()).unwrap();
    assert_eq!(out.report.loss_bits, 0);
    assert_eq!(out.report.verdict, Verdict::SkipStep);
    assert!(out.record.skipped);
    assert_eq!(tr.optimizer().skipped_steps(), 1);
    assert_eq!(tr.optimizer().step_count(), t_before);
    let after = snapshot(&tr);
    for (a, b) in before.iter().zip(&after) {
        assert!(a.bitwise_eq(b));
    }
    assert!(!tr.step(x, y).unwrap().record.skipped);
}

#[test]
fn unguarded_training_applies_the_update() {
    let cfg = TrainerConfig {
        guard: false,
        ..Default::default()
    };
    let mut tr = Trainer::new(model(3), cfg).unwrap();
    let (x, y) = batch();
    let before = tr.model().param_values();
    let n = x.numel();
    let out = tr.step(x.with_bits(vec![0; n]).unwrap(), y).unwrap();
    assert!(!out.record.skipped);
    assert!(before
        .iter()
        .zip(tr.model().param_values())
        .any(|(a, b)| !a.bitwise_eq(&b)));
}

#[test]
fn same_seed_same_trajectory() {
    let run = || {
        let mut tr = Trainer::new(model(8), TrainerConfig::default()).unwrap();
        let (x, y) = batch();
        (0..50)
            .map(|_| tr.step(x.clone(), y.clone()).unwrap().record)
            .collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a.last().unwrap().loss < a[0].loss);
}
