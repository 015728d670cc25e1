mod common;

use common::randomized_model;
use probcodec::codec::synth::synthetic_images;
use probcodec::lifting::TransformMode;
use probcodec::model::{Group, Model, ModelConfig};
use probcodec::nn::testing::gradient_relative_error;
use probcodec::nn::{Eval, Graph, Tape};
use probcodec::pyramid::Plane;
use probcodec::train::{
    objective, optimizer_from_bytes, SampleObjective, TrainConfig, TrainSample, Trainer,
};
use probcodec::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset(n: usize, size: usize) -> Vec<Plane<f64>> {
    synthetic_images(3, n, size, size).iter().map(|i| i.plane(0).map(|v| v - 128.0)).collect()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        lambda: 4.0,
        steps: 6,
        warmstart_steps: 3,
        batch: 2,
        patch: 16,
        lr: 1e-3,
        checkpoint_every: 2,
        ..TrainConfig::default()
    }
}

fn small_model() -> Model {
    Model::new(ModelConfig { levels: 2, ..ModelConfig::default() }, 5).unwrap()
}

#[test]
fn objective_gradients_match_finite_differences() {
    for levels in [2, 4] {
        let m = randomized_model(levels, 11, 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = dataset(1, 16).remove(0);
        let sample = TrainSample::new(x, levels, &mut rng).unwrap();
        let f = SampleObjective { model: &m, sample: &sample, lambda: 8.0, mode: TransformMode::Learned };
        for group in [Group::Lifting, Group::Posterior, Group::Context] {
            let ids = m.group_ids(group);
            let err = gradient_relative_error(&m.store, &f, &ids, 1e-5, 6).unwrap();
            assert!(err <= 1e-3, "levels {levels}, {group:?}: {err:e}");
        }
    }
}

#[test]
fn every_group_receives_gradient_after_warm_start() {
    let cfg = TrainConfig { steps: 3, ..small_config() };
    let mut t = Trainer::new(small_model(), cfg, dataset(4, 32)).unwrap();
    t.run(|_| Ok(()), |_, _| Ok(())).unwrap();
    let samples = t.batch_samples(3).unwrap();
    let mut tape = Tape::new(&t.model.store);
    let terms = objective(&mut tape, &t.model, &samples[0], 4.0, TransformMode::Learned).unwrap();
    let grads = tape.backward(terms.loss).unwrap();
    for group in [Group::Lifting, Group::Posterior, Group::Context] {
        let norm: f64 = t
            .model
            .group_ids(group)
            .iter()
            .filter_map(|&id| grads.get(id))
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum();
        assert!(norm > 0.0, "{group:?} has no gradient");
    }
}

#[test]
fn warm_start_leaves_the_transform_alone() {
    let cfg = TrainConfig { steps: 3, ..small_config() };
    let before = small_model();
    let mut t = Trainer::new(before.clone(), cfg, dataset(4, 32)).unwrap();
    t.run(|_| Ok(()), |_, _| Ok(())).unwrap();
    assert_eq!(t.model.transform_mode(), TransformMode::Classical);
    for id in t.model.group_ids(Group::Lifting) {
        assert_eq!(t.model.store.value(id), before.store.value(id));
    }
    let moved = t.model.group_ids(Group::Context).iter().any(|&id| t.model.store.value(id) != before.store.value(id));
    assert!(moved);
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let data = dataset(4, 32);
    let mut straight = Trainer::new(small_model(), small_config(), data.clone()).unwrap();
    let mut log_a = Vec::new();
    let cps = straight.run(|r| Ok(log_a.push(r.clone())), |_, _| Ok(())).unwrap();
    assert_eq!(cps.iter().map(|c| c.step).collect::<Vec<_>>(), vec![2, 4, 6]);
    assert!(cps.iter().all(|c| c.inversion_error <= 1e-9));

    let mut first = Trainer::new(small_model(), TrainConfig { steps: 4, ..small_config() }, data.clone()).unwrap();
    let mut log_b = Vec::new();
    first.run(|r| Ok(log_b.push(r.clone())), |_, _| Ok(())).unwrap();
    let model = Model::from_bytes(&first.model.to_bytes().unwrap()).unwrap();
    let adam = optimizer_from_bytes(&model.store, &first.optimizer_bytes().unwrap()).unwrap();
    let mut second = Trainer::resume(model, adam, small_config(), data).unwrap();
    second.run(|r| Ok(log_b.push(r.clone())), |_, _| Ok(())).unwrap();

    assert_eq!(log_a, log_b);
    assert_eq!(straight.model.to_bytes().unwrap(), second.model.to_bytes().unwrap());
    assert_ne!(straight.model.transform_mode(), TransformMode::Classical);
}

#[test]
fn worker_threads_do_not_change_the_result() {
    let data = dataset(4, 32);
    let run = |threads| {
        let mut t = Trainer::new(small_model(), TrainConfig { threads, steps: 4, ..small_config() }, data.clone())
            .unwrap();
        t.run(|_| Ok(()), |_, _| Ok(())).unwrap();
        t.model.to_bytes().unwrap()
    };
    assert_eq!(run(1), run(2));
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let mut m = small_model();
    let id = m.group_ids(Group::Context)[0];
    m.store.get_mut(id).value.data_mut()[0] = f64::NAN;
    let mut t = Trainer::new(m, small_config(), dataset(2, 32)).unwrap();
    match t.step() {
        Err(Error::NonFinite { step: 0, detail }) => assert!(detail.contains("image 0")),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn rate_diagnostic_agrees_with_the_graph() {
    let m = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sample = TrainSample::new(dataset(1, 16).remove(0), 2, &mut rng).unwrap();
    let mut g = Eval::new(&m.store);
    let t = objective(&mut g, &m, &sample, 2.0, TransformMode::Classical).unwrap();
    let (nll, rate, mse, loss) =
        (g.value(&t.nll).item(), g.value(&t.rate).item(), g.value(&t.mse).item(), g.value(&t.loss).item());
    assert!(((nll + 2.0 * rate) / 256.0 + mse - loss).abs() < 1e-9);
    assert!(rate > 0.0);
}

#[test]
fn invalid_setups_are_rejected() {
    assert!(Trainer::new(small_model(), small_config(), Vec::new()).is_err());
    assert!(Trainer::new(small_model(), TrainConfig { patch: 64, ..small_config() }, dataset(2, 32)).is_err());
    assert!(Trainer::new(small_model(), TrainConfig { lambda: -1.0, ..small_config() }, dataset(2, 32)).is_err());
}
