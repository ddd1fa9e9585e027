use yolors::data::AnnotatedImage;
use yolors::detector::{count_flops, sample_loss, train, Detector, ModelConfig, Sgd, Toggles};
use yolors::io::{generate_synthetic, run_variant, SyntheticSpec};
use yolors::tensor::{mac_counter, no_grad, reset_mac_counter};

const VARIANTS: [&str; 7] = ["full", "no-caa", "no-rfaconv", "no-bifpn", "no-acmix", "no-self-attention", "no-rfafpn"];

fn tiny_data(train: usize, val: usize) -> (Vec<AnnotatedImage>, Vec<AnnotatedImage>) {
    let spec = SyntheticSpec {
        image_size: 32,
        object_size: (8, 12),
        train_images: train,
        val_images: val,
        seed: 3,
        ..SyntheticSpec::default()
    };
    let d = generate_synthetic(&spec).unwrap();
    (d.train, d.val)
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        input_size: 32,
        stage_widths: vec![4, 8, 8, 8],
        channels: 8,
        batch_size: 2,
        epochs: 2,
        ..ModelConfig::default()
    }
}

fn snapshot(m: &Detector) -> Vec<(String, Vec<f64>)> {
    m.named_params().into_iter().map(|(n, t)| (n, t.to_vec())).collect()
}

#[test]
fn training_is_deterministic() {
    let (tr, val) = tiny_data(6, 2);
    let cfg = ModelConfig { eval_every: 1, ..tiny_config() };
    let a = train(&tr, Some(&val), &cfg, None).unwrap();
    let b = train(&tr, Some(&val), &cfg, None).unwrap();
    assert_eq!(a.log, b.log);
    let fmt = |log: &[yolors::detector::EpochLog]| log.iter().map(|e| format!("{:.12}", e.loss)).collect::<Vec<_>>();
    assert_eq!(fmt(&a.log), fmt(&b.log));
    assert_eq!(snapshot(&a.model), snapshot(&b.model));
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (tr, _) = tiny_data(4, 0);
    let cfg = ModelConfig { lr: 0.0, lr_final: 0.0, ..tiny_config() };
    let fresh = Detector::new(&cfg).unwrap();
    let trained = train(&tr, None, &cfg, None).unwrap();
    assert_eq!(snapshot(&fresh), snapshot(&trained.model));
}

#[test]
fn overfits_a_single_sample() {
    let (tr, _) = tiny_data(1, 0);
    let cfg = ModelConfig {
        toggles: Toggles { acmix: false, ..Toggles::FULL },
        batch_size: 1,
        ..tiny_config()
    };
    let model = Detector::new(&cfg).unwrap();
    let mut opt = Sgd::new(model.generator_params(), cfg.momentum).with_max_grad_norm(cfg.max_grad_norm);
    let initial = sample_loss(&model, &tr[0]).unwrap().total.item();
    let mut last = initial;
    for _ in 0..200 {
        opt.zero_grad();
        let l = sample_loss(&model, &tr[0]).unwrap();
        last = l.total.item();
        if last < 0.1 * initial {
            break;
        }
        l.total.backward().unwrap();
        opt.step(cfg.lr);
    }
    assert!(last < 0.1 * initial, "loss {last} after 200 steps, initial {initial}");
}

#[test]
fn mac_counter_matches_flop_report() {
    let (tr, _) = tiny_data(1, 0);
    for v in VARIANTS {
        let cfg = ModelConfig { toggles: Toggles::variant(v).unwrap(), ..tiny_config() };
        let model = Detector::new(&cfg).unwrap();
        reset_mac_counter();
        no_grad(|| model.forward_with(&tr[0].image.to_signed_tensor(), false)).unwrap();
        assert_eq!(mac_counter(), count_flops(&cfg).unwrap().total_macs, "variant {v}");
    }
}

#[test]
fn generator_and_discriminator_steps_touch_only_their_own_side() {
    let (tr, _) = tiny_data(1, 0);
    let cfg = tiny_config();
    let model = Detector::new(&cfg).unwrap();
    let disc_names: Vec<String> = model
        .named_params()
        .into_iter()
        .filter(|(_, t)| model.disc_params().iter().any(|d| d.id() == t.id()))
        .map(|(n, _)| n)
        .collect();
    assert!(!disc_names.is_empty());
    let split = |m: &Detector| -> (Vec<(String, Vec<f64>)>, Vec<(String, Vec<f64>)>) {
        snapshot(m).into_iter().partition(|(n, _)| disc_names.contains(n))
    };

    let mut gen = Sgd::new(model.generator_params(), 0.0);
    let mut disc = Sgd::new(model.disc_params(), 0.0);

    let (d0, g0) = split(&model);
    let l = sample_loss(&model, &tr[0]).unwrap();
    gen.zero_grad();
    l.total.backward().unwrap();
    gen.step(0.01);
    let (d1, g1) = split(&model);
    assert_eq!(d0, d1, "generator step moved discriminator weights");
    assert_ne!(g0, g1);

    let l = sample_loss(&model, &tr[0]).unwrap();
    let d_loss = l.d_loss.expect("adversarial branch active");
    let before = d_loss.item();
    disc.zero_grad();
    d_loss.backward().unwrap();
    disc.step(0.01);
    let (d2, g2) = split(&model);
    assert_eq!(g1, g2, "discriminator step moved generator weights");
    assert_ne!(d1, d2);
    let after = sample_loss(&model, &tr[0]).unwrap().d_loss.unwrap().item();
    assert!(after < before, "discriminator loss {before} -> {after}");
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let (tr, _) = tiny_data(3, 0);
    let cfg = ModelConfig { epochs: 1, ..tiny_config() };
    let model = train(&tr, None, &cfg, None).unwrap().model;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model.save(&path).unwrap();
    let back = Detector::load(&path, &cfg).unwrap();
    assert_eq!(snapshot(&model), snapshot(&back));
    let img = tr[0].image.to_signed_tensor();
    let a = model.predict(&img, 0.0).unwrap();
    let b = back.predict(&img, 0.0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn ablation_rows_are_reproducible() {
    let (tr, val) = tiny_data(4, 2);
    let cfg = ModelConfig { epochs: 1, ..tiny_config() };
    let a = run_variant(&cfg, "no-bifpn", 7, &tr, &val).unwrap();
    let b = run_variant(&cfg, "no-bifpn", 7, &tr, &val).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.variant, "no-bifpn");
    assert!(a.ok());
}

#[test]
fn images_without_objects_still_train() {
    let (mut tr, _) = tiny_data(1, 0);
    tr[0].labels.clear();
    let cfg = ModelConfig {
        epochs: 1,
        batch_size: 1,
        toggles: Toggles { acmix: false, ..Toggles::FULL },
        ..tiny_config()
    };
    let out = train(&tr, None, &cfg, None).unwrap();
    assert!(out.log[0].loss.is_finite());
    // Class-balanced augmentation needs at least one labelled object.
    let with_acmix = ModelConfig { toggles: Toggles::FULL, ..cfg };
    assert!(matches!(train(&tr, None, &with_acmix, None), Err(yolors::Error::Data(_))));
}
