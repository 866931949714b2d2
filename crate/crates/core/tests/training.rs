use cape_core::backbone::{fixed_random_backbone, Architecture, ConvSpec};
use cape_core::heads::CapeHead;
use cape_core::model::Model;
use cape_core::synth::{generate, SynthSpec};
use cape_core::training::{accuracy, train, Schedule, TrainConfig};

fn arch() -> Architecture {
    Architecture {
        input_height: 16,
        input_width: 16,
        layers: vec![
            ConvSpec { in_channels: 3, out_channels: 6, stride: 2 },
            ConvSpec { in_channels: 6, out_channels: 12, stride: 1 },
        ],
    }
}

fn toy() -> (Vec<cape_core::data::Example>, Vec<cape_core::data::Example>) {
    let (data, _) = generate(&SynthSpec {
        height: 16,
        width: 16,
        train: 120,
        test: 30,
        seed: 2,
        ..SynthSpec::default()
    })
    .unwrap();
    (data.train, data.test)
}

fn cfg(base: TrainConfig, lr: f64, epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: Some(lr),
        epochs: Some(epochs),
        schedule: Schedule::Linear { final_fraction: 0.1 },
        batch_size: 16,
        ..base
    }
}

#[test]
fn zero_epochs_is_a_no_op() {
    let (train_set, _) = toy();
    let model = Model::init(&arch(), 3, 2.0, 1).unwrap();
    let out = train(model.clone(), &train_set, &[], &cfg(TrainConfig::from_scratch(), 0.05, 0)).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.model, model);
}

#[test]
fn post_fit_needs_a_trained_classifier() {
    let (train_set, _) = toy();
    let model = Model::init(&arch(), 3, 2.0, 1).unwrap();
    assert!(train(model, &train_set, &[], &TrainConfig::post_fit()).is_err());
    assert!(train(Model::init(&arch(), 3, 2.0, 1).unwrap(), &[], &[], &TrainConfig::from_scratch()).is_err());
}

#[test]
fn post_fit_on_frozen_random_backbone() {
    let (train_set, val_set) = toy();
    let mut model = Model::init(&arch(), 3, 2.0, 3).unwrap();
    model.backbone = fixed_random_backbone(0, &arch()).unwrap();
    // Linear probe on the frozen features stands in for a trained classifier.
    let probe = train(model, &train_set, &val_set, &cfg(TrainConfig::from_scratch(), 0.1, 5)).unwrap().model;
    assert!(probe.vanilla_pretrained);

    let mut start = probe.clone();
    start.cape = CapeHead::from_vanilla(&start.vanilla);
    let (_, initial) = accuracy(&start, &train_set).unwrap();
    let out = train(probe.clone(), &train_set, &val_set, &cfg(TrainConfig::post_fit(), 0.05, 5)).unwrap();
    let last = out.log.last().unwrap();
    assert!(last.cape_train_acc >= initial, "{} < {initial}", last.cape_train_acc);
    assert_eq!(out.log.len(), 5);
    // Only the CAPE head moved.
    assert_eq!(out.model.backbone, probe.backbone);
    assert_eq!(out.model.vanilla, probe.vanilla);
    assert_ne!(out.model.cape, start.cape);
}

#[test]
fn fixed_seed_is_bit_identical() {
    let (train_set, val_set) = toy();
    let run = || {
        let model = Model::init(&arch(), 3, 2.0, 7).unwrap();
        train(model, &train_set, &val_set, &cfg(TrainConfig::from_scratch(), 0.05, 2)).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.model, b.model);
    assert_eq!(a.log, b.log);
}
