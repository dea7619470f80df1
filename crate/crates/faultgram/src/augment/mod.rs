//! Per-class WGAN-GP augmentation: train one generator/critic pair on each
//! fault class's encoded images, then draw synthetic images to pad out small
//! training sets.
//!
//! The critic minimizes `E[D(fake)] - E[D(real)] + lambda * E[(|grad D| - 1)^2]`
//! and the generator minimizes `-E[D(fake)]`. The penalty gradient is taken
//! with respect to random real/fake interpolates, per sample, which requires
//! differentiating through the critic's input gradient — a double-backward
//! pass on the tape.

use crate::autodiff::{grad, Adam, Tensor};
use crate::container::{self, ContainerError, NamedArray};
use crate::gafenc::{GafImage, GafMeta};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

mod nets;

pub use nets::{CriticNet, GeneratorNet};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("bad config: {reason}")]
    BadConfig { reason: String },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("non-finite critic input-gradient in the penalty term")]
    NonFiniteGradient,
    #[error("non-finite loss at generator step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("class {label} has {have} images, need at least {need}")]
    InsufficientData {
        label: usize,
        have: usize,
        need: usize,
    },
    #[error("checkpoint: {reason}")]
    BadCheckpoint { reason: String },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanTrainConfig {
    pub z_dim: usize,
    /// Penalty coefficient; 10 is the canonical setting.
    pub lambda_gp: f64,
    pub critic_steps_per_gen: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub total_gen_steps: u64,
    pub image_size: usize,
    /// Channel width of the narrowest conv block; the stacks double it per
    /// resolution level.
    pub base_channels: usize,
    pub seed: u64,
    /// Persist a checkpoint every this many generator steps (0 = only at
    /// the end). Takes effect only with `checkpoint_dir` set.
    pub checkpoint_every: u64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        GanTrainConfig {
            z_dim: 64,
            lambda_gp: 10.0,
            critic_steps_per_gen: 5,
            batch_size: 32,
            learning_rate: 1e-4,
            adam_betas: (0.0, 0.9),
            total_gen_steps: 300,
            image_size: 64,
            base_channels: 16,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |reason: String| Err(AugmentError::BadConfig { reason });
        if self.lambda_gp < 0.0 {
            return bad(format!("lambda_gp {} must be >= 0", self.lambda_gp));
        }
        if self.critic_steps_per_gen < 1 {
            return bad("critic_steps_per_gen must be >= 1".to_string());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2".to_string());
        }
        if self.z_dim < 1 || self.base_channels < 1 {
            return bad("z_dim and base_channels must be positive".to_string());
        }
        let p = self.image_size;
        if p < 8 || !p.is_power_of_two() {
            return bad(format!("image_size {p} must be a power of two >= 8"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return bad(format!("learning_rate {}", self.learning_rate));
        }
        Ok(())
    }
}

/// A batch of standard-Gaussian latent vectors plus the seed that drew it.
#[derive(Debug, Clone)]
pub struct LatentBatch {
    pub vectors: Array2<f64>,
    pub seed: u64,
}

/// Draw `n` i.i.d. standard-Gaussian latent vectors.
pub fn sample_latent(n: usize, z_dim: usize, seed: u64) -> LatentBatch {
    assert!(n >= 1, "need at least one latent vector");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::StandardNormal;
    let vectors = Array2::from_shape_fn((n, z_dim), |_| normal.sample(&mut rng));
    LatentBatch { vectors, seed }
}

impl LatentBatch {
    pub fn tensor(&self) -> Tensor {
        Tensor::constant(self.vectors.clone().into_dyn())
    }
}

/// Offset mixed into a latent batch's seed to derive its interpolation
/// epsilons, so [`critic_loss`] is reproducible term by term.
pub const INTERPOLATION_SEED_OFFSET: u64 = 0x5e_1f;

/// Draw the per-sample interpolation coefficients for a given seed.
pub fn interpolation_eps(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()
}

/// Per-sample convex combinations `eps*real + (1-eps)*fake` with
/// `eps ~ Uniform(0, 1)` drawn from `seed`.
pub fn interpolate_samples(
    real: &Tensor,
    fake: &Tensor,
    seed: u64,
) -> Result<Tensor, AugmentError> {
    interpolate_with(real, fake, &interpolation_eps(real.shape()[0], seed))
}

/// Deterministic-coefficient variant of [`interpolate_samples`].
pub fn interpolate_with(
    real: &Tensor,
    fake: &Tensor,
    eps: &[f64],
) -> Result<Tensor, AugmentError> {
    if real.shape() != fake.shape() {
        return Err(AugmentError::ShapeMismatch {
            expected: format!("{:?}", real.shape()),
            got: format!("{:?}", fake.shape()),
        });
    }
    let n = real.shape()[0];
    assert_eq!(eps.len(), n, "one epsilon per sample");
    let mut out = real.data().clone();
    let per = out.len() / n.max(1);
    for (i, (v, f)) in out.iter_mut().zip(fake.data().iter()).enumerate() {
        let e = eps[i / per];
        *v = e * *v + (1.0 - e) * f;
    }
    Ok(Tensor::constant(out))
}

/// The Eq. 9 penalty: `lambda * mean((|grad_x D(x)| - 1)^2)` over the batch,
/// with the gradient flattened per sample.
///
/// Returned as a tape tensor so critic-parameter gradients flow through the
/// input-gradient (double backward). The norm deliberately has no epsilon:
/// a zero input-gradient makes the penalty's own gradient non-finite, which
/// training reports as an error instead of silently flattening.
pub fn gradient_penalty(
    critic: &CriticNet,
    interpolated: &Tensor,
    lambda_gp: f64,
) -> Result<Tensor, AugmentError> {
    gradient_penalty_with(|x| critic.forward(x), interpolated, lambda_gp)
}

/// [`gradient_penalty`] for any per-sample scoring function (the function
/// must map `(n, ...)` inputs to `(n, 1)` scores with no cross-sample
/// coupling, or the per-sample gradient readout is wrong).
pub fn gradient_penalty_with(
    critic: impl Fn(&Tensor) -> Tensor,
    interpolated: &Tensor,
    lambda_gp: f64,
) -> Result<Tensor, AugmentError> {
    let shape = interpolated.shape().to_vec();
    let n = shape[0];
    let x = Tensor::var(interpolated.data().clone());
    let scores = critic(&x);
    let g = grad(&scores.sum_all(), &[&x]).remove(0);
    if !g.all_finite() {
        return Err(AugmentError::NonFiniteGradient);
    }
    let per_sample = g.reshape(&[n, shape.iter().skip(1).product()]);
    let norms = per_sample.square().sum_axes(&[1], false).sqrt();
    Ok(norms.add_scalar(-1.0).square().mean_all().scale(lambda_gp))
}

/// Everything the critic objective is made of, as plain numbers for logging.
#[derive(Debug, Clone, Copy)]
pub struct CriticTerms {
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
    pub gp_term: f64,
    /// `mean D(real) - mean D(fake)`, the Wasserstein distance estimate.
    pub wasserstein: f64,
}

/// Critic objective on one real batch and one latent batch:
/// `mean D(fake) - mean D(real) + gradient_penalty`.
///
/// Fake images are treated as fixed data here (the generator is not updated
/// through this loss). Interpolation coefficients derive from
/// `z.seed + INTERPOLATION_SEED_OFFSET`.
pub fn critic_loss(
    critic: &CriticNet,
    generator: &GeneratorNet,
    real: &Tensor,
    z: &LatentBatch,
    lambda_gp: f64,
) -> Result<(Tensor, CriticTerms), AugmentError> {
    let fake = generator.forward(&z.tensor()).detach();
    if real.shape() != fake.shape() {
        return Err(AugmentError::ShapeMismatch {
            expected: format!("real batch of {:?}", fake.shape()),
            got: format!("{:?}", real.shape()),
        });
    }
    let d_real = critic.forward(real).mean_all();
    let d_fake = critic.forward(&fake).mean_all();
    let xhat = interpolate_samples(real, &fake, z.seed.wrapping_add(INTERPOLATION_SEED_OFFSET))?;
    let gp = gradient_penalty(critic, &xhat, lambda_gp)?;
    let loss = &(&d_fake - &d_real) + &gp;
    let terms = CriticTerms {
        d_real_mean: d_real.item(),
        d_fake_mean: d_fake.item(),
        gp_term: gp.item(),
        wasserstein: d_real.item() - d_fake.item(),
    };
    Ok((loss, terms))
}

/// Generator objective: `-mean D(G(z))`.
pub fn generator_loss(
    critic: &CriticNet,
    generator: &GeneratorNet,
    z: &LatentBatch,
) -> Result<Tensor, AugmentError> {
    let fake = generator.forward(&z.tensor());
    Ok(critic.forward(&fake).mean_all().scale(-1.0))
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub critic_loss: f64,
    pub gen_loss: f64,
    pub gp_term: f64,
    pub wasserstein_estimate: f64,
}

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step_count: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

/// Complete training state of one class's GAN.
pub struct GanCheckpoint {
    pub config: GanTrainConfig,
    pub label: usize,
    pub label_name: String,
    pub gen_step: u64,
    pub generator: Vec<(String, ArrayD<f64>)>,
    pub critic: Vec<(String, ArrayD<f64>)>,
    pub gen_opt: AdamState,
    pub critic_opt: AdamState,
    pub metrics: Vec<StepMetrics>,
}

fn snapshot(set: &crate::autodiff::ParamSet) -> Vec<(String, ArrayD<f64>)> {
    set.iter()
        .map(|p| (p.name().to_string(), p.tensor().data().clone()))
        .collect()
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic sub-seed for a (seed, stream, index) triple.
fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix(seed ^ splitmix(stream.wrapping_add(1)) ^ splitmix(index.wrapping_add(0x1000)))
}

/// Fresh step-0 training state for one class.
pub fn init_gan(
    config: &GanTrainConfig,
    label: usize,
    label_name: &str,
) -> Result<GanCheckpoint, AugmentError> {
    config.validate()?;
    let gen = GeneratorNet::init(config, derive_seed(config.seed, label as u64, 0xA));
    let critic = CriticNet::init(config, derive_seed(config.seed, label as u64, 0xB));
    Ok(GanCheckpoint {
        config: config.clone(),
        label,
        label_name: label_name.to_string(),
        gen_step: 0,
        generator: snapshot(&gen.set),
        critic: snapshot(&critic.set),
        gen_opt: AdamState::default(),
        critic_opt: AdamState::default(),
        metrics: Vec::new(),
    })
}

fn make_adam(
    set: &crate::autodiff::ParamSet,
    config: &GanTrainConfig,
    state: &AdamState,
) -> Adam {
    let mut adam = Adam::new(set, config.learning_rate, config.adam_betas.0, config.adam_betas.1);
    if state.step_count > 0 || !state.m.is_empty() {
        adam.load_state(state.step_count, state.m.clone(), state.v.clone());
    }
    adam
}

fn adam_state(adam: &Adam) -> AdamState {
    let (step_count, m, v) = adam.state();
    AdamState {
        step_count,
        m: m.to_vec(),
        v: v.to_vec(),
    }
}

/// Advance the GAN by one generator step: `critic_steps_per_gen` critic
/// updates on `real`, then one generator update. Latent batches derive from
/// `(config.seed, gen_step, substep)`, so a resumed run replays an
/// uninterrupted one exactly. Returns the advanced state; on a non-finite
/// loss the input state is untouched and still valid.
pub fn gan_train_step(
    state: &GanCheckpoint,
    real: &Tensor,
    config: &GanTrainConfig,
) -> Result<GanCheckpoint, AugmentError> {
    config.validate()?;
    let step = state.gen_step;
    let gen = GeneratorNet::from_arrays(&state.generator, config)?;
    let critic = CriticNet::from_arrays(&state.critic, config)?;
    let mut adam_g = make_adam(&gen.set, config, &state.gen_opt);
    let mut adam_c = make_adam(&critic.set, config, &state.critic_opt);
    let n = real.shape()[0];

    let mut last_terms = None;
    let mut last_loss = 0.0;
    for i in 0..config.critic_steps_per_gen {
        let z = sample_latent(
            n,
            config.z_dim,
            derive_seed(config.seed, step, 0x100 + i as u64),
        );
        let (loss, terms) = critic_loss(&critic, &gen, real, &z, config.lambda_gp)?;
        last_loss = loss.item();
        if !last_loss.is_finite() {
            return Err(AugmentError::NonFiniteLoss {
                step,
                detail: format!("critic loss {last_loss} at critic substep {i}"),
            });
        }
        let grads = {
            let tensors = critic.set.tensors();
            let refs: Vec<&Tensor> = tensors.iter().collect();
            grad(&loss, &refs)
        };
        adam_c.step(&critic.set, &grads);
        last_terms = Some(terms);
    }

    let z = sample_latent(n, config.z_dim, derive_seed(config.seed, step, 0x200));
    let gloss = generator_loss(&critic, &gen, &z)?;
    let gen_loss = gloss.item();
    if !gen_loss.is_finite() {
        return Err(AugmentError::NonFiniteLoss {
            step,
            detail: format!("generator loss {gen_loss}"),
        });
    }
    let grads = {
        let tensors = gen.set.tensors();
        let refs: Vec<&Tensor> = tensors.iter().collect();
        grad(&gloss, &refs)
    };
    adam_g.step(&gen.set, &grads);

    let terms = last_terms.expect("critic_steps_per_gen >= 1");
    let mut metrics = state.metrics.clone();
    metrics.push(StepMetrics {
        step: step + 1,
        critic_loss: last_loss,
        gen_loss,
        gp_term: terms.gp_term,
        wasserstein_estimate: terms.wasserstein,
    });

    Ok(GanCheckpoint {
        config: config.clone(),
        label: state.label,
        label_name: state.label_name.clone(),
        gen_step: step + 1,
        generator: snapshot(&gen.set),
        critic: snapshot(&critic.set),
        gen_opt: adam_state(&adam_g),
        critic_opt: adam_state(&adam_c),
        metrics,
    })
}

fn batch_tensor(images: &[&GafImage], p: usize) -> Result<Tensor, AugmentError> {
    let mut data = ArrayD::zeros(IxDyn(&[images.len(), 1, p, p]));
    for (i, im) in images.iter().enumerate() {
        if im.p() != p || im.pixels.ncols() != p {
            return Err(AugmentError::ShapeMismatch {
                expected: format!("{p}x{p} images"),
                got: format!("{}x{} at index {i}", im.p(), im.pixels.ncols()),
            });
        }
        for ((r, c), &v) in im.pixels.indexed_iter() {
            data[[i, 0, r, c]] = v;
        }
    }
    Ok(Tensor::constant(data))
}

/// Where `train_wgan_gp` persists (and resumes) one class's checkpoint.
pub fn checkpoint_path(dir: &Path, label: usize) -> PathBuf {
    dir.join(format!("gan_class{label}.fgc"))
}

/// Where `train_wgan_gp` streams one class's per-step metrics.
pub fn metrics_path(dir: &Path, label: usize) -> PathBuf {
    dir.join(format!("gan_class{label}_metrics.csv"))
}

/// Write the per-step training metrics table (header plus one row per
/// generator step).
pub fn write_metrics_csv(path: &Path, metrics: &[StepMetrics]) -> Result<(), AugmentError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "step,critic_loss,gen_loss,gp_term,wasserstein_estimate")?;
    for m in metrics {
        writeln!(
            f,
            "{},{},{},{},{}",
            m.step, m.critic_loss, m.gen_loss, m.gp_term, m.wasserstein_estimate
        )?;
    }
    Ok(())
}

/// Train one GAN per class present in `images`, to
/// `config.total_gen_steps` generator steps each.
///
/// Classes are processed in ascending label order. With a checkpoint
/// directory configured, training resumes from any checkpoint found there
/// and persists progress every `checkpoint_every` steps plus once at the
/// end (alongside a CSV metrics log).
pub fn train_wgan_gp(
    images: &[GafImage],
    config: &GanTrainConfig,
) -> Result<Vec<GanCheckpoint>, AugmentError> {
    config.validate()?;
    let mut by_class: BTreeMap<usize, Vec<&GafImage>> = BTreeMap::new();
    for im in images {
        by_class.entry(im.label).or_default().push(im);
    }
    let mut out = Vec::with_capacity(by_class.len());
    for (label, class_images) in by_class {
        if class_images.len() < config.batch_size {
            return Err(AugmentError::InsufficientData {
                label,
                have: class_images.len(),
                need: config.batch_size,
            });
        }
        let name = class_images[0].label_name.clone();
        let mut state = match &config.checkpoint_dir {
            Some(dir) if checkpoint_path(dir, label).exists() => {
                let ck = load_gan_checkpoint(&checkpoint_path(dir, label))?;
                if ck.label != label {
                    return Err(AugmentError::BadCheckpoint {
                        reason: format!("checkpoint label {} at class {label}", ck.label),
                    });
                }
                ck
            }
            _ => init_gan(config, label, &name)?,
        };

        while state.gen_step < config.total_gen_steps {
            let step = state.gen_step;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                config.seed,
                0x3000 + label as u64,
                step,
            ));
            let picks =
                rand::seq::index::sample(&mut rng, class_images.len(), config.batch_size);
            let batch: Vec<&GafImage> = picks.iter().map(|i| class_images[i]).collect();
            let real = batch_tensor(&batch, config.image_size)?;
            state = gan_train_step(&state, &real, config)?;

            if let Some(dir) = &config.checkpoint_dir {
                let due = config.checkpoint_every > 0
                    && state.gen_step % config.checkpoint_every == 0;
                if due || state.gen_step == config.total_gen_steps {
                    std::fs::create_dir_all(dir)?;
                    save_gan_checkpoint(&state, &checkpoint_path(dir, label))?;
                    write_metrics_csv(&metrics_path(dir, label), &state.metrics)?;
                }
            }
        }
        out.push(state);
    }
    Ok(out)
}

/// Draw `n` synthetic images from a trained generator. Pixels are clamped
/// to `[-1, 1]` and the diagonal is zeroed; antisymmetry is *not* imposed
/// (see [`antisymmetrize_image`] for the optional projection).
pub fn generate_samples(checkpoint: &GanCheckpoint, n: usize, seed: u64) -> Vec<GafImage> {
    assert!(n >= 1, "need at least one sample");
    let gen = GeneratorNet::from_arrays(&checkpoint.generator, &checkpoint.config)
        .expect("checkpoint arrays match their own config");
    let z = sample_latent(n, checkpoint.config.z_dim, seed);
    let x = gen.forward(&z.tensor());
    let p = checkpoint.config.image_size;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut pixels = Array2::zeros((p, p));
        for r in 0..p {
            for c in 0..p {
                pixels[(r, c)] = if r == c {
                    0.0
                } else {
                    x.data()[[i, 0, r, c]].clamp(-1.0, 1.0)
                };
            }
        }
        out.push(GafImage {
            pixels,
            label: checkpoint.label,
            label_name: checkpoint.label_name.clone(),
            meta: GafMeta {
                source_path: format!(
                    "gan://{}/step{}/seed{seed}/{i}",
                    checkpoint.label_name, checkpoint.gen_step
                ),
                channel: "generated".to_string(),
                offset: i,
                paa_factor: 1,
                norm_min: -1.0,
                norm_max: 1.0,
                synthetic: true,
            },
        });
    }
    out
}

/// Project an image onto the antisymmetric part `(G - G^T) / 2`. Optional:
/// generator output is used raw by default.
pub fn antisymmetrize_image(image: &GafImage) -> GafImage {
    let p = image.p();
    let mut pixels = Array2::zeros((p, p));
    for i in 0..p {
        for j in 0..p {
            pixels[(i, j)] = (image.pixels[(i, j)] - image.pixels[(j, i)]) / 2.0;
        }
    }
    GafImage {
        pixels,
        ..image.clone()
    }
}

/// Per-class comparison of a synthetic set against the real set it mimics.
#[derive(Debug, Clone, Serialize)]
pub struct ClassFidelity {
    pub label: usize,
    pub label_name: String,
    pub real_count: usize,
    pub synthetic_count: usize,
    pub real_mean: f64,
    pub real_std: f64,
    pub synthetic_mean: f64,
    pub synthetic_std: f64,
    /// `|mean difference| + |std difference|`.
    pub moment_distance: f64,
    /// Per-synthetic-image RMS pixel distance to its nearest real image:
    /// small minima flag memorization, large medians flag poor fit.
    pub nn_rms_min: f64,
    pub nn_rms_median: f64,
    pub nn_rms_mean: f64,
    /// Mean absolute difference between row-space Gram matrices of each
    /// synthetic image and its nearest real neighbour.
    pub gram_distance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FidelityReport {
    pub classes: Vec<ClassFidelity>,
}

fn pixel_moments(images: &[&GafImage]) -> (f64, f64) {
    let mut sum = 0.0;
    let mut count = 0usize;
    for im in images {
        sum += im.pixels.iter().sum::<f64>();
        count += im.pixels.len();
    }
    let mean = sum / count as f64;
    let mut ss = 0.0;
    for im in images {
        ss += im.pixels.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    }
    (mean, (ss / count as f64).sqrt())
}

fn rms_distance(a: &GafImage, b: &GafImage) -> f64 {
    let n = a.pixels.len();
    let ss: f64 = a
        .pixels
        .iter()
        .zip(b.pixels.iter())
        .map(|(x, y)| (x - y).powi(2))
        .sum();
    (ss / n as f64).sqrt()
}

fn row_gram(image: &GafImage) -> Array2<f64> {
    let rows: Vec<Vec<f64>> = image
        .pixels
        .rows()
        .into_iter()
        .map(|r| r.to_vec())
        .collect();
    crate::gafenc::gram_matrix(&rows).expect("square image rows")
}

/// Compare moments, nearest-neighbour distances, and Gram structure between
/// the real and synthetic sets, class by class.
pub fn fidelity_report(real: &[GafImage], synthetic: &[GafImage]) -> FidelityReport {
    assert!(
        !real.is_empty() && !synthetic.is_empty(),
        "fidelity_report needs both sets nonempty"
    );
    let mut real_by: BTreeMap<usize, Vec<&GafImage>> = BTreeMap::new();
    for im in real {
        real_by.entry(im.label).or_default().push(im);
    }
    let mut synth_by: BTreeMap<usize, Vec<&GafImage>> = BTreeMap::new();
    for im in synthetic {
        synth_by.entry(im.label).or_default().push(im);
    }

    let mut classes = Vec::new();
    for (label, synth) in &synth_by {
        let Some(reals) = real_by.get(label) else {
            continue;
        };
        let (real_mean, real_std) = pixel_moments(reals);
        let (synthetic_mean, synthetic_std) = pixel_moments(synth);

        let mut nn = Vec::with_capacity(synth.len());
        let mut gram_sum = 0.0;
        for s in synth {
            let (mut best_d, mut best) = (f64::INFINITY, reals[0]);
            for r in reals.iter() {
                let d = rms_distance(s, r);
                if d < best_d {
                    best_d = d;
                    best = r;
                }
            }
            nn.push(best_d);
            let (gs, gr) = (row_gram(s), row_gram(best));
            let p2 = (gs.len()) as f64;
            gram_sum += gs
                .iter()
                .zip(gr.iter())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / p2;
        }
        nn.sort_by(f64::total_cmp);
        classes.push(ClassFidelity {
            label: *label,
            label_name: synth[0].label_name.clone(),
            real_count: reals.len(),
            synthetic_count: synth.len(),
            real_mean,
            real_std,
            synthetic_mean,
            synthetic_std,
            moment_distance: (real_mean - synthetic_mean).abs()
                + (real_std - synthetic_std).abs(),
            nn_rms_min: nn[0],
            nn_rms_median: nn[nn.len() / 2],
            nn_rms_mean: nn.iter().sum::<f64>() / nn.len() as f64,
            gram_distance: gram_sum / synth.len() as f64,
        });
    }
    FidelityReport { classes }
}

// ---------------------------------------------------------------------------
// checkpoint persistence
// ---------------------------------------------------------------------------

const GAN_SCHEMA: &str = "gan-checkpoint";

fn named(prefix: &str, arrays: &[(String, ArrayD<f64>)]) -> Vec<NamedArray> {
    arrays
        .iter()
        .map(|(name, data)| NamedArray {
            name: format!("{prefix}.{name}"),
            shape: data.shape().to_vec(),
            values: container::quantize(
                data.as_standard_layout().as_slice().expect("standard layout"),
            ),
        })
        .collect()
}

fn opt_arrays(prefix: &str, names: &[(String, ArrayD<f64>)], st: &AdamState) -> Vec<NamedArray> {
    let mut out = Vec::new();
    for ((name, _), (m, v)) in names.iter().zip(st.m.iter().zip(&st.v)) {
        out.extend(named(&format!("{prefix}.m"), &[(name.clone(), m.clone())]));
        out.extend(named(&format!("{prefix}.v"), &[(name.clone(), v.clone())]));
    }
    out
}

pub fn save_gan_checkpoint(ck: &GanCheckpoint, path: &Path) -> Result<(), AugmentError> {
    let mut arrays = named("gen", &ck.generator);
    arrays.extend(named("critic", &ck.critic));
    arrays.extend(opt_arrays("gopt", &ck.generator, &ck.gen_opt));
    arrays.extend(opt_arrays("copt", &ck.critic, &ck.critic_opt));
    let (layout, payload) = container::pack_arrays(&arrays);
    let meta = serde_json::json!({
        "schema": GAN_SCHEMA,
        "config": ck.config,
        "label": ck.label,
        "label_name": ck.label_name,
        "gen_step": ck.gen_step,
        "gen_opt_steps": ck.gen_opt.step_count,
        "critic_opt_steps": ck.critic_opt.step_count,
        "metrics": ck.metrics,
        "arrays": layout,
    });
    container::write_container(path, &meta, &payload)?;
    Ok(())
}

pub fn load_gan_checkpoint(path: &Path) -> Result<GanCheckpoint, AugmentError> {
    let c = container::read_container(path)?;
    let bad = |reason: String| AugmentError::BadCheckpoint { reason };
    if c.meta["schema"] != GAN_SCHEMA {
        return Err(bad(format!("schema {} unexpected", c.meta["schema"])));
    }
    let config: GanTrainConfig = serde_json::from_value(c.meta["config"].clone())
        .map_err(|e| bad(format!("config: {e}")))?;
    let label = c.meta["label"].as_u64().ok_or_else(|| bad("label".into()))? as usize;
    let label_name = c.meta["label_name"]
        .as_str()
        .ok_or_else(|| bad("label_name".into()))?
        .to_string();
    let gen_step = c.meta["gen_step"]
        .as_u64()
        .ok_or_else(|| bad("gen_step".into()))?;
    let metrics: Vec<StepMetrics> = serde_json::from_value(c.meta["metrics"].clone())
        .map_err(|e| bad(format!("metrics: {e}")))?;

    let mut generator = Vec::new();
    let mut critic = Vec::new();
    let mut gen_opt = AdamState {
        step_count: c.meta["gen_opt_steps"].as_u64().unwrap_or(0),
        ..AdamState::default()
    };
    let mut critic_opt = AdamState {
        step_count: c.meta["critic_opt_steps"].as_u64().unwrap_or(0),
        ..AdamState::default()
    };
    for a in container::unpack_arrays(&c.meta["arrays"], &c.payload)? {
        let data = ArrayD::from_shape_vec(IxDyn(&a.shape), container::dequantize(&a.values))
            .map_err(|e| bad(format!("array {}: {e}", a.name)))?;
        match a.name.split_once('.') {
            Some(("gen", rest)) => generator.push((rest.to_string(), data)),
            Some(("critic", rest)) => critic.push((rest.to_string(), data)),
            Some(("gopt", rest)) => match rest.split_once('.') {
                Some(("m", _)) => gen_opt.m.push(data),
                Some(("v", _)) => gen_opt.v.push(data),
                _ => return Err(bad(format!("array {}", a.name))),
            },
            Some(("copt", rest)) => match rest.split_once('.') {
                Some(("m", _)) => critic_opt.m.push(data),
                Some(("v", _)) => critic_opt.v.push(data),
                _ => return Err(bad(format!("array {}", a.name))),
            },
            _ => return Err(bad(format!("array {}", a.name))),
        }
    }
    if generator.len() != gen_opt.m.len() || critic.len() != critic_opt.m.len() {
        return Err(bad("optimizer state does not cover the parameters".to_string()));
    }
    Ok(GanCheckpoint {
        config,
        label,
        label_name,
        gen_step,
        generator,
        critic,
        gen_opt,
        critic_opt,
        metrics,
    })
}

#[cfg(test)]
mod tests;
