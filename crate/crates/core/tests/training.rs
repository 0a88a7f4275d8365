mod common;

use adnet::eval::{evaluate, ConfusionMatrix};
use adnet::layers::Params;
use adnet::network::Gradients;
use adnet::network::{build_config, freeze_prefix, init_params, ConfigName, Model, Scale};
use adnet::training::{make_batch, sgd_step, train, TrainingConfig};
use adnet::Tensor;
use common::separable_images;

fn overfit_config() -> TrainingConfig {
    TrainingConfig {
        learning_rate: 0.01,
        batch_size: 4,
        epochs: 1,
        freeze_depth: 0,
        seed: 7,
        dropout_rate: 0.5,
        momentum: 0.0,
        deterministic: true,
    }
}

fn train_accuracy(
    spec: &adnet::NetworkSpec,
    ckpt: &adnet::Checkpoint<f32>,
    data: &[(Tensor, adnet::Label)],
) -> f64 {
    let mut model = Model::new(spec.clone(), ckpt.clone()).unwrap();
    evaluate(&mut model, data).unwrap().accuracy
}

#[test]
fn tiny_e_overfits_sixteen_images() {
    let spec = build_config(ConfigName::E, Scale::Tiny);
    let data = separable_images(16, 1);
    let cfg = overfit_config();
    let mut ckpt = None;
    let mut reached = None;
    for epoch in 1..=200 {
        let (next, _) = train(&spec, data.as_slice(), &cfg, ckpt.take(), |_| {}).unwrap();
        if train_accuracy(&spec, &next, &data) == 1.0 {
            reached = Some(epoch);
            break;
        }
        ckpt = Some(next);
    }
    assert!(reached.is_some(), "never reached 100% training accuracy");
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let spec = build_config(ConfigName::A, Scale::Tiny);
    let data = separable_images(10, 2);
    let cfg = TrainingConfig {
        epochs: 3,
        batch_size: 3,
        ..overfit_config()
    };
    let (a, log_a) = train(&spec, data.as_slice(), &cfg, None, |_| {}).unwrap();
    let (b, log_b) = train(&spec, data.as_slice(), &cfg, None, |_| {}).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(log_a.to_text(false), log_b.to_text(false));

    let other = TrainingConfig { seed: 8, ..cfg };
    let (c, _) = train(&spec, data.as_slice(), &other, None, |_| {}).unwrap();
    assert_ne!(a.to_bytes(), c.to_bytes());
}

#[test]
fn parallel_and_sequential_training_agree() {
    let spec = build_config(ConfigName::B, Scale::Tiny);
    let data = separable_images(6, 3);
    let cfg = TrainingConfig {
        epochs: 2,
        batch_size: 3,
        ..overfit_config()
    };
    let (a, _) = train(&spec, data.as_slice(), &cfg, None, |_| {}).unwrap();
    let par = TrainingConfig {
        deterministic: false,
        ..cfg
    };
    let (b, _) = train(&spec, data.as_slice(), &par, None, |_| {}).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
}

#[test]
fn resuming_epoch_by_epoch_matches_one_run() {
    let spec = build_config(ConfigName::A, Scale::Tiny);
    let data = separable_images(8, 4);
    let cfg = TrainingConfig {
        epochs: 3,
        batch_size: 3,
        ..overfit_config()
    };
    let (whole, _) = train(&spec, data.as_slice(), &cfg, None, |_| {}).unwrap();
    let one = TrainingConfig { epochs: 1, ..cfg };
    let mut ckpt = None;
    for _ in 0..3 {
        ckpt = Some(train(&spec, data.as_slice(), &one, ckpt, |_| {}).unwrap().0);
    }
    assert_eq!(whole.to_bytes(), ckpt.unwrap().to_bytes());
}

#[test]
fn frozen_layers_never_change() {
    let spec = build_config(ConfigName::D, Scale::Tiny);
    let data = separable_images(8, 5);
    let cfg = TrainingConfig {
        epochs: 2,
        batch_size: 4,
        freeze_depth: 5,
        ..overfit_config()
    };
    let init = init_params::<f32>(&spec, cfg.seed).unwrap();
    let (after, _) = train(&spec, data.as_slice(), &cfg, Some(init.clone()), |_| {}).unwrap();
    for (i, (before, now)) in init.layers.iter().zip(&after.layers).enumerate() {
        if i < 5 {
            assert_eq!(before.params, now.params, "layer {} moved", before.name);
            assert!(!now.trainable);
        } else {
            assert_ne!(
                before.params.weight, now.params.weight,
                "layer {} never moved",
                before.name
            );
        }
    }
    let frozen = freeze_prefix(&spec, 5).unwrap();
    assert_eq!(after.trainable_count(), frozen.weight_layer_count() - 5);
}

#[test]
fn freezing_every_layer_makes_steps_no_ops() {
    let spec = build_config(ConfigName::A, Scale::Tiny);
    let frozen = freeze_prefix(&spec, spec.weight_layer_count()).unwrap();
    let mut model = Model::new(frozen, init_params::<f32>(&spec, 3).unwrap()).unwrap();
    let (x, t) = make_batch(&separable_images(4, 9)).unwrap();
    let (_, _, grads) = model.loss_and_grads(&x, &t, 1).unwrap();
    assert!(grads.layers.iter().all(Option::is_none));

    let before = model.checkpoint().clone();
    let ones = Gradients {
        layers: before
            .layers
            .iter()
            .map(|l| {
                Some(Params {
                    weight: l.params.weight.map(|_| 1.0),
                    bias: l.params.bias.map(|_| 1.0),
                })
            })
            .collect(),
    };
    sgd_step(model.checkpoint_mut(), &ones, 0.1, 0.0).unwrap();
    sgd_step(model.checkpoint_mut(), &grads, 0.1, 0.9).unwrap();
    assert_eq!(model.checkpoint().to_bytes(), before.to_bytes());
    assert!(freeze_prefix(&spec, spec.weight_layer_count() + 1).is_err());
}

#[test]
fn overfit_task_loss_settles_monotonically() {
    let spec = build_config(ConfigName::E, Scale::Tiny);
    let data = separable_images(16, 1);
    let cfg = TrainingConfig {
        epochs: 60,
        dropout_rate: 0.0,
        ..overfit_config()
    };
    let (_, log) = train(&spec, data.as_slice(), &cfg, None, |_| {}).unwrap();
    let losses: Vec<f64> = log.epochs.iter().map(|e| e.mean_loss).collect();
    assert!(losses[1] < losses[0]);
    for (i, w) in losses.windows(2).enumerate().skip(2) {
        assert!(
            w[1] <= 1.05 * w[0],
            "epoch {} loss {} after {}",
            i + 2,
            w[1],
            w[0]
        );
    }
    assert!(losses[59] < 0.1 * losses[0]);
}

#[test]
fn confusion_matrices_add() {
    let a = ConfusionMatrix {
        true_pos: 1,
        true_neg: 2,
        false_pos: 3,
        false_neg: 4,
    };
    let mut b = a;
    b += a;
    assert_eq!(b.total(), 20);
    assert_eq!(b.accuracy().unwrap(), 0.3);
}
