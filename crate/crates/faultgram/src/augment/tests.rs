use super::*;
use crate::autodiff::Tensor;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;

const P: usize = 16;

fn tiny_config() -> GanTrainConfig {
    GanTrainConfig {
        z_dim: 16,
        batch_size: 8,
        image_size: P,
        base_channels: 4,
        total_gen_steps: 4,
        ..GanTrainConfig::default()
    }
}

fn toy_image(label: usize, seed: u64) -> GafImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = Array2::from_shape_fn((P, P), |(i, j)| {
        let stripe = if label == 0 { j } else { i };
        let base = if stripe % 2 == 0 { 0.6 } else { -0.6 };
        base + rng.gen_range(-0.05..0.05)
    });
    GafImage {
        pixels,
        label,
        label_name: format!("class{label}"),
        meta: GafMeta {
            source_path: "test://toy".to_string(),
            channel: "horizontal".to_string(),
            offset: 0,
            paa_factor: 1,
            norm_min: -1.0,
            norm_max: 1.0,
            synthetic: false,
        },
    }
}

fn toy_set(label: usize, count: usize) -> Vec<GafImage> {
    (0..count)
        .map(|k| toy_image(label, 40_000 + (label * count + k) as u64))
        .collect()
}

fn real_tensor(images: &[GafImage]) -> Tensor {
    let refs: Vec<&GafImage> = images.iter().collect();
    super::batch_tensor(&refs, P).unwrap()
}

/// A critic whose every weight and bias is zero (so D = 0 everywhere),
/// optionally with the head bias lifted to a constant c.
fn constant_critic(cfg: &GanTrainConfig, c: f64) -> CriticNet {
    let critic = CriticNet::init(cfg, 1);
    for p in critic.set.iter() {
        let shape = p.tensor().shape().to_vec();
        let fill = if p.name() == "head.b" { c } else { 0.0 };
        p.set_data(ArrayD::from_elem(IxDyn(&shape), fill));
    }
    critic
}

// ---------------------------------------------------------------------------
// latent sampling and interpolation
// ---------------------------------------------------------------------------

#[test]
fn latent_batches_are_gaussian_and_deterministic() {
    let a = sample_latent(4, 64, 9);
    assert_eq!(a.vectors.dim(), (4, 64));
    let b = sample_latent(4, 64, 9);
    assert_eq!(a.vectors, b.vectors);
    assert_ne!(a.vectors, sample_latent(4, 64, 10).vectors);

    let big = sample_latent(10_000, 64, 11);
    for dim in 0..64 {
        let col = big.vectors.column(dim);
        let mean = col.sum() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
        assert!(mean.abs() < 0.05, "dim {dim} mean {mean}");
        assert!((0.9..1.1).contains(&var), "dim {dim} variance {var}");
    }
}

#[test]
fn interpolation_endpoints_and_convexity() {
    let real = Tensor::constant(ArrayD::from_shape_fn(IxDyn(&[3, 1, 2, 2]), |_| 1.0));
    let fake = Tensor::constant(ArrayD::from_shape_fn(IxDyn(&[3, 1, 2, 2]), |_| -1.0));

    let ones = interpolate_with(&real, &fake, &[1.0; 3]).unwrap();
    assert!(ones.data().iter().all(|&v| v == 1.0));
    let zeros = interpolate_with(&real, &fake, &[0.0; 3]).unwrap();
    assert!(zeros.data().iter().all(|&v| v == -1.0));

    let r = super::batch_tensor(&toy_set(0, 3).iter().collect::<Vec<_>>(), P).unwrap();
    let f = super::batch_tensor(&toy_set(1, 3).iter().collect::<Vec<_>>(), P).unwrap();
    let mix = interpolate_samples(&r, &f, 123).unwrap();
    for ((a, b), m) in r.data().iter().zip(f.data().iter()).zip(mix.data().iter()) {
        let (lo, hi) = (a.min(*b), a.max(*b));
        assert!((lo..=hi).contains(m));
    }

    let bad = Tensor::zeros(&[2, 1, 2, 2]);
    assert!(matches!(
        interpolate_samples(&real, &bad, 1),
        Err(AugmentError::ShapeMismatch { .. })
    ));
}

// ---------------------------------------------------------------------------
// the three loss pieces
// ---------------------------------------------------------------------------

#[test]
fn constant_critic_pays_exactly_lambda() {
    let cfg = tiny_config();
    let critic = constant_critic(&cfg, 3.5);
    let x = real_tensor(&toy_set(0, 4));
    let gp = gradient_penalty(&critic, &x, 10.0).unwrap();
    assert_eq!(gp.item(), 10.0);
}

#[test]
fn unit_gradient_critic_pays_nothing() {
    let d = P * P;
    let mut w = ArrayD::from_shape_fn(IxDyn(&[d, 1]), |ix| ((ix[0] * 7 + 3) % 13) as f64 - 6.0);
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    w.mapv_inplace(|v| v / norm);
    let wt = Tensor::constant(w);
    let linear = |x: &Tensor| x.reshape(&[x.shape()[0], d]).matmul(&wt);
    let x = real_tensor(&toy_set(0, 4));
    let gp = gradient_penalty_with(linear, &x, 10.0).unwrap();
    assert!(gp.item().abs() < 1e-20, "penalty {}", gp.item());
}

#[test]
fn penalty_input_gradient_matches_finite_differences() {
    // A ~200-parameter two-layer critic, differentiated by hand-rolled FD.
    let w1 = Tensor::constant(ArrayD::from_shape_fn(IxDyn(&[2, 1, 4, 4]), |ix| {
        ((ix[0] * 31 + ix[2] * 7 + ix[3] * 3) % 11) as f64 * 0.05 - 0.25
    }));
    let w2 = Tensor::constant(ArrayD::from_shape_fn(IxDyn(&[32, 1]), |ix| {
        ((ix[0] * 13 + 5) % 9) as f64 * 0.1 - 0.4
    }));
    let critic = |x: &Tensor| {
        let h = crate::autodiff::conv2d(x, &w1, (2, 2), (1, 1)).leaky_relu(0.2);
        h.reshape(&[x.shape()[0], 32]).matmul(&w2)
    };

    let x0 = Tensor::var(ArrayD::from_shape_fn(IxDyn(&[2, 1, 8, 8]), |ix| {
        ((ix[0] * 3 + ix[2] * 5 + ix[3] * 11) % 17) as f64 * 0.1 - 0.8
    }));
    let scores = critic(&x0);
    let analytic = crate::autodiff::grad(&scores.sum_all(), &[&x0]).remove(0);

    const H: f64 = 1e-5;
    for e in (0..x0.len()).step_by(7) {
        let probe = |delta: f64| {
            let mut data = x0.data().clone();
            *data.iter_mut().nth(e).unwrap() += delta;
            critic(&Tensor::constant(data)).sum_all().item()
        };
        let fd = (probe(H) - probe(-H)) / (2.0 * H);
        let a = analytic.data().iter().copied().nth(e).unwrap();
        let denom = a.abs().max(fd.abs());
        assert!(
            denom < 1e-8 || (a - fd).abs() / denom < 1e-4,
            "entry {e}: analytic {a} vs fd {fd}"
        );
    }
}

#[test]
fn penalty_is_nonnegative() {
    let cfg = tiny_config();
    let critic = CriticNet::init(&cfg, 7);
    for seed in 0..5 {
        let x = real_tensor(&toy_set(seed % 2, 4));
        let gp = gradient_penalty(&critic, &x, 10.0).unwrap();
        assert!(gp.item() >= 0.0);
    }
}

#[test]
fn critic_loss_decomposes_term_by_term() {
    let cfg = tiny_config();

    // Zero critic: both expectations vanish, only the penalty is left.
    let zero = constant_critic(&cfg, 0.0);
    let gen = GeneratorNet::init(&cfg, 5);
    let real = real_tensor(&toy_set(0, 8));
    let z = sample_latent(8, cfg.z_dim, 77);
    let (loss, terms) = critic_loss(&zero, &gen, &real, &z, 10.0).unwrap();
    assert_eq!(loss.item(), 10.0);
    assert_eq!(terms.wasserstein, 0.0);
    let (loss, _) = critic_loss(&zero, &gen, &real, &z, 0.0).unwrap();
    assert_eq!(loss.item(), 0.0);

    // Random nets: the reported loss equals the independently composed sum.
    let critic = CriticNet::init(&cfg, 6);
    let (loss, terms) = critic_loss(&critic, &gen, &real, &z, 10.0).unwrap();
    let fake = gen.forward(&z.tensor()).detach();
    let d_real = critic.forward(&real).mean_all().item();
    let d_fake = critic.forward(&fake).mean_all().item();
    let xhat =
        interpolate_samples(&real, &fake, z.seed.wrapping_add(INTERPOLATION_SEED_OFFSET)).unwrap();
    let gp = gradient_penalty(&critic, &xhat, 10.0).unwrap().item();
    assert_eq!(loss.item().to_bits(), (d_fake - d_real + gp).to_bits());
    assert_eq!(terms.gp_term.to_bits(), gp.to_bits());
    assert_eq!(terms.wasserstein.to_bits(), (d_real - d_fake).to_bits());
}

#[test]
fn generator_loss_is_negated_critic_mean() {
    let cfg = tiny_config();
    let gen = GeneratorNet::init(&cfg, 2);
    let z = sample_latent(4, cfg.z_dim, 3);

    let zero = constant_critic(&cfg, 0.0);
    assert_eq!(generator_loss(&zero, &gen, &z).unwrap().item(), 0.0);
    let five = constant_critic(&cfg, 5.0);
    assert_eq!(generator_loss(&five, &gen, &z).unwrap().item(), -5.0);

    let critic = CriticNet::init(&cfg, 8);
    let loss = generator_loss(&critic, &gen, &z).unwrap().item();
    let direct = -critic
        .forward(&gen.forward(&z.tensor()))
        .mean_all()
        .item();
    assert_eq!(loss.to_bits(), direct.to_bits());
}

// ---------------------------------------------------------------------------
// training steps
// ---------------------------------------------------------------------------

#[test]
fn zero_learning_rate_step_only_bumps_bookkeeping() {
    let cfg = GanTrainConfig {
        learning_rate: 0.0,
        ..tiny_config()
    };
    let state = init_gan(&cfg, 0, "class0").unwrap();
    let real = real_tensor(&toy_set(0, cfg.batch_size));
    let next = gan_train_step(&state, &real, &cfg).unwrap();
    assert_eq!(next.gen_step, 1);
    assert_eq!(next.metrics.len(), 1);
    assert_eq!(next.metrics[0].step, 1);
    for ((an, ad), (bn, bd)) in state.generator.iter().zip(&next.generator) {
        assert_eq!(an, bn);
        assert_eq!(ad, bd);
    }
    for ((_, ad), (_, bd)) in state.critic.iter().zip(&next.critic) {
        assert_eq!(ad, bd);
    }
}

#[test]
fn training_shrinks_the_wasserstein_estimate() {
    // Desk-scale run of the canonical experiment: per-class GANs on a
    // 2-class striped-image set, 200 generator steps each. Early on the
    // critic is still calibrating (the penalty dominates its loss); by
    // step 10 it separates real from fake, and from there the estimate
    // should fall as the generator catches up — required of the median
    // seed of three, i.e. at least two.
    let images: Vec<GafImage> = toy_set(0, 24).into_iter().chain(toy_set(1, 24)).collect();
    let mut verdicts = Vec::new();
    let mut trained = None;
    for seed in 0..3u64 {
        let cfg = GanTrainConfig {
            total_gen_steps: 200,
            learning_rate: 2e-3,
            seed,
            ..tiny_config()
        };
        let checkpoints = train_wgan_gp(&images, &cfg).unwrap();
        verdicts.push(checkpoints.iter().all(|ck| {
            let at = |step: u64| {
                ck.metrics
                    .iter()
                    .find(|m| m.step == step)
                    .unwrap()
                    .wasserstein_estimate
                    .abs()
            };
            at(200) < at(10)
        }));
        if seed == 0 {
            trained = Some(checkpoints);
        }
    }
    let passing = verdicts.iter().filter(|&&v| v).count();
    assert!(passing >= 2, "wasserstein shrank in only {passing}/3 seeds");

    // The trained class-0 generator's pixel moments approach the real
    // class-0 set's, and beat the untrained generator's by a clear margin.
    let trained = trained.unwrap();
    let reals = toy_set(0, 24);
    let real_refs: Vec<&GafImage> = reals.iter().collect();
    let (real_mean, real_std) = super::pixel_moments(&real_refs);
    let gen_imgs = generate_samples(&trained[0], 24, 5);
    let gen_refs: Vec<&GafImage> = gen_imgs.iter().collect();
    let (gm, gs) = super::pixel_moments(&gen_refs);
    assert!(
        (gm - real_mean).abs() < 0.2 && (gs - real_std).abs() < 0.2,
        "trained moments ({gm:.3}, {gs:.3}) vs real ({real_mean:.3}, {real_std:.3})"
    );

    let fresh = init_gan(&tiny_config(), 0, "class0").unwrap();
    let raw_imgs = generate_samples(&fresh, 24, 5);
    let raw_refs: Vec<&GafImage> = raw_imgs.iter().collect();
    let (um, us) = super::pixel_moments(&raw_refs);
    let trained_dist = (gm - real_mean).abs() + (gs - real_std).abs();
    let untrained_dist = (um - real_mean).abs() + (us - real_std).abs();
    assert!(
        untrained_dist > trained_dist,
        "untrained {untrained_dist:.3} vs trained {trained_dist:.3}"
    );
}

#[test]
fn per_class_training_resumes_from_disk() {
    let images: Vec<GafImage> = toy_set(0, 12).into_iter().chain(toy_set(1, 12)).collect();
    let cfg = GanTrainConfig {
        total_gen_steps: 6,
        batch_size: 4,
        seed: 21,
        ..tiny_config()
    };
    let straight = train_wgan_gp(&images, &cfg).unwrap();
    assert_eq!(straight.len(), 2);
    assert_eq!(straight[0].label, 0);
    assert_eq!(straight[1].label, 1);
    assert_eq!(straight[0].metrics.len(), 6);

    // Same seed, fresh run: metrics are bit-identical.
    let again = train_wgan_gp(&images, &cfg).unwrap();
    for (a, b) in straight.iter().zip(&again) {
        assert_eq!(a.metrics, b.metrics);
    }

    // Interrupted at step 3 with persistence, then resumed to step 6: the
    // recorded prefix matches the uninterrupted run.
    let dir = tempfile::tempdir().unwrap();
    let half = GanTrainConfig {
        total_gen_steps: 3,
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..cfg.clone()
    };
    train_wgan_gp(&images, &half).unwrap();
    let full = GanTrainConfig {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..cfg.clone()
    };
    let resumed = train_wgan_gp(&images, &full).unwrap();
    for (s, r) in straight.iter().zip(&resumed) {
        assert_eq!(r.metrics.len(), 6);
        assert_eq!(&s.metrics[..3], &r.metrics[..3]);
    }

    let csv = std::fs::read_to_string(dir.path().join("gan_class0_metrics.csv")).unwrap();
    assert!(csv.starts_with("step,critic_loss,gen_loss,gp_term,wasserstein_estimate"));
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn training_needs_a_full_batch_per_class() {
    let images = toy_set(0, 3);
    let cfg = tiny_config();
    assert!(matches!(
        train_wgan_gp(&images, &cfg),
        Err(AugmentError::InsufficientData { label: 0, have: 3, need: 8 })
    ));
}

#[test]
fn gan_checkpoint_round_trips() {
    let images = toy_set(2, 8).into_iter().map(|mut im| { im.label = 2; im }).collect::<Vec<_>>();
    let cfg = GanTrainConfig {
        total_gen_steps: 2,
        ..tiny_config()
    };
    let ck = train_wgan_gp(&images, &cfg).unwrap().remove(0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gan.fgc");
    save_gan_checkpoint(&ck, &path).unwrap();
    let loaded = load_gan_checkpoint(&path).unwrap();
    assert_eq!(loaded.label, 2);
    assert_eq!(loaded.label_name, ck.label_name);
    assert_eq!(loaded.gen_step, 2);
    assert_eq!(loaded.metrics, ck.metrics);
    assert_eq!(loaded.config, ck.config);
    for ((an, ad), (bn, bd)) in ck.generator.iter().zip(&loaded.generator) {
        assert_eq!(an, bn);
        for (x, y) in ad.iter().zip(bd.iter()) {
            assert_eq!(*x as f32, *y as f32);
        }
    }
    // Generation from the reloaded checkpoint works and matches shapes.
    let imgs = generate_samples(&loaded, 3, 1);
    assert_eq!(imgs.len(), 3);
}

// ---------------------------------------------------------------------------
// sampling and fidelity
// ---------------------------------------------------------------------------

#[test]
fn generated_samples_respect_the_contract() {
    let state = init_gan(&tiny_config(), 1, "outer_race").unwrap();
    let a = generate_samples(&state, 10, 42);
    assert_eq!(a.len(), 10);
    let b = generate_samples(&state, 10, 42);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.pixels, y.pixels);
    }
    for im in &a {
        assert_eq!(im.p(), P);
        assert_eq!(im.label, 1);
        assert_eq!(im.label_name, "outer_race");
        assert!(im.meta.synthetic);
        for i in 0..P {
            assert_eq!(im.pixels[(i, i)], 0.0);
            for j in 0..P {
                assert!(im.pixels[(i, j)].abs() <= 1.0);
            }
        }
    }

    let anti = antisymmetrize_image(&a[0]);
    for i in 0..P {
        for j in 0..P {
            assert_eq!(anti.pixels[(i, j)], -anti.pixels[(j, i)]);
        }
    }
}

#[test]
fn fidelity_report_orders_copies_and_noise() {
    let real = toy_set(0, 6);
    let copies: Vec<GafImage> = real
        .iter()
        .map(|im| {
            let mut c = im.clone();
            c.meta.synthetic = true;
            c
        })
        .collect();
    let report = fidelity_report(&real, &copies);
    assert_eq!(report.classes.len(), 1);
    let c = &report.classes[0];
    assert_eq!(c.nn_rms_min, 0.0);
    assert_eq!(c.nn_rms_median, 0.0);
    assert_eq!(c.nn_rms_mean, 0.0);
    assert_eq!(c.gram_distance, 0.0);
    assert!(c.moment_distance < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise: Vec<GafImage> = (0..6)
        .map(|_| {
            let mut im = toy_image(0, 0);
            im.pixels = Array2::from_shape_fn((P, P), |_| rng.gen_range(-0.1..0.1));
            im.meta.synthetic = true;
            im
        })
        .collect();
    let noisy = fidelity_report(&real, &noise);
    let n = &noisy.classes[0];
    assert!(n.moment_distance > c.moment_distance);
    assert!(n.nn_rms_mean > 0.0);
    for v in [n.real_mean, n.real_std, n.synthetic_mean, n.synthetic_std, n.gram_distance] {
        assert!(v.is_finite());
    }
}
