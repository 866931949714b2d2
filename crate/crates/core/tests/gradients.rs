use approx::assert_abs_diff_eq;
use cape_core::backbone::{Architecture, ConvSpec, Image};
use cape_core::data::Example;
use cape_core::model::{Model, ParamId};
use cape_core::tensor::{softmax, Tensor};
use cape_core::training::{
    bootstrap_loss, bootstrap_loss_from_features, grad_check, grad_check_against, grad_check_features,
    GradCheckOptions, TrainConfig, TrainMode,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_arch() -> Architecture {
    Architecture {
        input_height: 8,
        input_width: 8,
        layers: vec![
            ConvSpec { in_channels: 3, out_channels: 4, stride: 2 },
            ConvSpec { in_channels: 4, out_channels: 6, stride: 1 },
        ],
    }
}

fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> Image {
    Image::new(Tensor::from_fn(&[h, w, 3], |_| rng.random_range(0.0..1.0))).unwrap()
}

fn batch(rng: &mut impl Rng, arch: &Architecture, n: usize, classes: usize) -> Vec<Example> {
    (0..n)
        .map(|i| Example::new(random_image(rng, arch.input_height, arch.input_width), i % classes))
        .collect()
}

/// Shifts head parameters off their init so CAPE and vanilla disagree.
fn perturb_heads(model: &mut Model, rng: &mut impl Rng) {
    for v in model.cape.weight.data_mut() {
        *v += rng.random_range(-0.5..0.5);
    }
    for v in model.cape.bias.data_mut() {
        *v += rng.random_range(-0.5..0.5);
    }
    for v in model.vanilla.bias.data_mut() {
        *v += rng.random_range(-0.5..0.5);
    }
    model.cape.log_temperature = rng.random_range(-0.3..0.5);
}

#[test]
fn linear_head_matches_closed_form() {
    let arch = Architecture {
        input_height: 1,
        input_width: 1,
        layers: vec![ConvSpec { in_channels: 3, out_channels: 2, stride: 1 }],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = Model::init(&arch, 2, 2.0, 3).unwrap();
    perturb_heads(&mut model, &mut rng);
    let f = Tensor::from_slice(&[0.7, 1.3]).reshape(vec![1, 1, 2]).unwrap();
    let label = 1;

    // Post-fitting: KL only, on the CAPE head.
    let config = TrainConfig::post_fit();
    let (_, g) = bootstrap_loss_from_features(&[(f.clone(), label)], &model, &config).unwrap();
    let teacher_logits: Vec<f64> = (0..2)
        .map(|c| (0..2).map(|k| f.data()[k] * model.vanilla.weight.data()[k * 2 + c]).sum::<f64>() + model.vanilla.bias.data()[c])
        .collect();
    let t = softmax(&teacher_logits.iter().map(|z| z / 2.0).collect::<Vec<_>>());
    let tp = model.cape.temperature();
    let u: Vec<f64> = (0..2)
        .map(|c| ((0..2).map(|k| f.data()[k] * model.cape.weight.data()[k * 2 + c]).sum::<f64>() + model.cape.bias.data()[c]) / tp)
        .collect();
    let p_hat = softmax(&u);
    let cape = g.cape.as_ref().unwrap();
    for c in 0..2 {
        let r = (p_hat[c] - t[c]) / tp;
        assert_abs_diff_eq!(cape.bias.data()[c], r, epsilon = 1e-12);
        for k in 0..2 {
            assert_abs_diff_eq!(cape.weight.data()[k * 2 + c], f.data()[k] * r, epsilon = 1e-12);
        }
    }
    let d_theta: f64 = -(0..2).map(|c| (p_hat[c] - t[c]) * u[c]).sum::<f64>();
    assert_abs_diff_eq!(cape.log_temperature, d_theta, epsilon = 1e-12);
    assert!(g.vanilla.is_none() && g.backbone.is_none());

    // From scratch: vanilla CE gradient is F (x) (p - q).
    let config = TrainConfig::from_scratch();
    let (_, g) = bootstrap_loss_from_features(&[(f.clone(), label)], &model, &config).unwrap();
    let p = softmax(&teacher_logits);
    let van = g.vanilla.as_ref().unwrap();
    for c in 0..2 {
        let r = p[c] - if c == label { 1.0 } else { 0.0 };
        assert_abs_diff_eq!(van.bias.data()[c], r, epsilon = 1e-12);
        for k in 0..2 {
            assert_abs_diff_eq!(van.weight.data()[k * 2 + c], f.data()[k] * r, epsilon = 1e-12);
        }
    }

    for config in [TrainConfig::post_fit(), TrainConfig::from_scratch()] {
        let options = GradCheckOptions {
            tolerance: 1e-8,
            abs_floor: 1e-8,
            ..GradCheckOptions::default()
        };
        let report = grad_check_features(&model, &[(f.clone(), label)], &config, &options).unwrap();
        assert!(report.passed, "{config:?}: {report:?}");
    }
}

#[test]
fn full_model_from_scratch() {
    let arch = small_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = Model::init(&arch, 3, 2.0, 9).unwrap();
    perturb_heads(&mut model, &mut rng);
    let data = batch(&mut rng, &arch, 4, 3);
    let refs: Vec<&Example> = data.iter().collect();
    let options = GradCheckOptions {
        conv_samples_per_layer: 50,
        ..GradCheckOptions::default()
    };
    let report = grad_check(&model, &refs, &TrainConfig::from_scratch(), &options).unwrap();
    assert!(report.passed, "{report:?}");
    assert!(report.checked >= 100 + 3 * 6 * 2);
}

#[test]
fn cape_ce_and_t_squared_variants() {
    let arch = small_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut model = Model::init(&arch, 3, 3.0, 1).unwrap();
    perturb_heads(&mut model, &mut rng);
    let data = batch(&mut rng, &arch, 3, 3);
    let refs: Vec<&Example> = data.iter().collect();
    let config = TrainConfig {
        ce_on_cape: true,
        kld_t_squared: true,
        teacher_temperature: 3.0,
        ..TrainConfig::from_scratch()
    };
    let report = grad_check(&model, &refs, &config, &GradCheckOptions::default()).unwrap();
    assert!(report.passed, "{report:?}");
    let (_, g) = bootstrap_loss(&refs, &model, &config).unwrap();
    assert!(g.vanilla.is_none());
    assert!(g.backbone.is_some() && g.cape.is_some());
}

#[test]
fn post_fit_touches_only_cape_head() {
    let arch = small_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut model = Model::init(&arch, 3, 2.0, 2).unwrap();
    perturb_heads(&mut model, &mut rng);
    let data = batch(&mut rng, &arch, 4, 3);
    let refs: Vec<&Example> = data.iter().collect();
    let config = TrainConfig::post_fit();
    let (loss, g) = bootstrap_loss(&refs, &model, &config).unwrap();
    assert!(g.backbone.is_none() && g.vanilla.is_none());
    assert!(g.cape.as_ref().unwrap().log_temperature != 0.0);
    assert_eq!(loss.total, loss.kld_term);
    let report = grad_check(&model, &refs, &config, &GradCheckOptions::default()).unwrap();
    assert!(report.passed, "{report:?}");

    let off = TrainConfig {
        beta: Some(0.0),
        mode: TrainMode::PostFit,
        ..TrainConfig::default()
    };
    let (_, g) = bootstrap_loss(&refs, &model, &off).unwrap();
    assert_eq!(g.max_abs(), 0.0);
}

#[test]
fn selective_kld_silent_when_predictions_agree() {
    let arch = small_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // Fresh init: CAPE head equals vanilla head, predictions mostly agree.
    let model = Model::init(&arch, 3, 2.0, 4).unwrap();
    let data = batch(&mut rng, &arch, 6, 3);
    let agreeing: Vec<&Example> = data
        .iter()
        .filter(|e| {
            model.predict_vanilla(&e.image).unwrap().argmax() == model.predict_cape(&e.image).unwrap().argmax()
        })
        .collect();
    assert!(!agreeing.is_empty());
    let config = TrainConfig {
        selective_kld: true,
        ..TrainConfig::post_fit()
    };
    let (loss, g) = bootstrap_loss(&agreeing, &model, &config).unwrap();
    assert_eq!(loss.kld_term, 0.0);
    assert_eq!(loss.kld_active_fraction, 0.0);
    assert!(g.cape.is_none());
}

#[test]
fn corrupted_gradient_is_caught() {
    let arch = small_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut model = Model::init(&arch, 3, 2.0, 5).unwrap();
    perturb_heads(&mut model, &mut rng);
    let data = batch(&mut rng, &arch, 2, 3);
    let refs: Vec<&Example> = data.iter().collect();
    let config = TrainConfig::post_fit();
    let (_, mut g) = bootstrap_loss(&refs, &model, &config).unwrap();
    *g.get_mut(ParamId::CapeWeight(0)).unwrap() += 0.1;
    let report = grad_check_against(&model, &refs, &config, &GradCheckOptions::default(), &g).unwrap();
    assert!(!report.passed);
    assert!(report.worst.unwrap().contains("cape"));
}
