//! Multi-scale attention CNN: a wide first convolution, three parallel
//! branches at kernel scales 5/7/9 with squeeze-and-excitation after every
//! stage, channel-wise fusion weighted by efficient channel attention, and a
//! global-average-pooled linear head.
//!
//! All layers are built on the [`crate::autodiff`] tape, so one forward pass
//! yields both logits and exact parameter gradients.

use crate::autodiff::{concat, conv2d, grad, maxpool2d, ParamSet, Tensor};
use crate::container::ContainerError;
use crate::dataio::SignalWindow;
use crate::gafenc::GafImage;
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

mod train;

pub use train::{
    cross_entropy, load_classifier_checkpoint, save_classifier_checkpoint, train_classifier,
    ClassifierCheckpoint, EpochStats, TrainConfig,
};

/// Variance guard for instance normalization.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum MacnnError {
    #[error("bad config: {reason}")]
    BadConfig { reason: String },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("{channels} channels not divisible by SE reduction {reduction}")]
    BadReduction { channels: usize, reduction: usize },
    #[error("bad ECA kernel {k} for {channels} channels (need odd k <= channels)")]
    BadKernel { k: usize, channels: usize },
    #[error("non-finite activation in forward pass")]
    NonFiniteActivation,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("checkpoint: {reason}")]
    BadCheckpoint { reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Whether the network consumes square images or raw 1-D windows.
///
/// The layer table's kernels are written one-dimensionally (64*1, 5*1, ...).
/// In `Image2d` mode each kernel becomes square (`k x k`) except the wide
/// layer, whose 64-wide kernel has no sensible square analogue at desk-scale
/// image sizes — it defaults to 7x7 instead. `Signal1d` keeps the literal
/// `k x 1` kernels and runs on un-encoded windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dims {
    Image2d,
    Signal1d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacnnConfig {
    /// Image side length (2-D) or window length (1-D).
    pub input_size: usize,
    pub in_channels: usize,
    pub wide_kernel: usize,
    pub wide_stride: usize,
    pub wide_filters: usize,
    /// One kernel size per parallel branch; odd and distinct.
    pub branch_kernels: [usize; 3],
    /// Output channels of the two convolution stages inside every branch.
    pub stage_filters: [usize; 2],
    /// SE bottleneck ratio r; must divide both stage filter counts.
    pub se_reduction: usize,
    pub eca_gamma: f64,
    pub eca_b: f64,
    pub num_classes: usize,
    pub dims: Dims,
}

impl Default for MacnnConfig {
    fn default() -> Self {
        MacnnConfig {
            input_size: 64,
            in_channels: 1,
            wide_kernel: 7,
            wide_stride: 2,
            wide_filters: 32,
            branch_kernels: [5, 7, 9],
            stage_filters: [64, 128],
            se_reduction: 16,
            eca_gamma: 2.0,
            eca_b: 1.0,
            num_classes: 4,
            dims: Dims::Image2d,
        }
    }
}

impl MacnnConfig {
    /// The literal layer table on raw windows: 64x1 wide kernel, stride 2.
    pub fn signal_1d(window_len: usize, num_classes: usize) -> Self {
        MacnnConfig {
            input_size: window_len,
            in_channels: 1,
            wide_kernel: 64,
            dims: Dims::Signal1d,
            num_classes,
            ..MacnnConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), MacnnError> {
        let bad = |reason: String| Err(MacnnError::BadConfig { reason });
        if self.num_classes < 2 {
            return bad(format!("num_classes {} < 2", self.num_classes));
        }
        let k = self.branch_kernels;
        if k.iter().any(|&v| v % 2 == 0) {
            return bad(format!("branch kernels {k:?} must all be odd"));
        }
        if k[0] == k[1] || k[1] == k[2] || k[0] == k[2] {
            return bad(format!("branch kernels {k:?} must be distinct"));
        }
        for &c in &self.stage_filters {
            if c == 0 || c % self.se_reduction != 0 {
                return bad(format!(
                    "stage filter count {c} not divisible by se_reduction {}",
                    self.se_reduction
                ));
            }
        }
        if self.wide_kernel == 0 || self.wide_stride == 0 || self.wide_filters == 0 {
            return bad("wide layer sizes must be positive".to_string());
        }
        if self.in_channels == 0 {
            return bad("in_channels must be positive".to_string());
        }
        if self.eca_gamma <= 0.0 {
            return bad(format!("eca_gamma {} must be positive", self.eca_gamma));
        }
        // Walk the stride plan; every pooling step needs spatial room.
        let mut s = self.input_size;
        s = conv_out(s, self.wide_stride);
        for _pool in 0..3 {
            if s < 2 {
                return bad(format!(
                    "input size {} collapses before the last pooling layer",
                    self.input_size
                ));
            }
            s /= 2;
        }
        Ok(())
    }

    /// Channel count entering the fusion layer.
    pub fn fused_channels(&self) -> usize {
        3 * self.stage_filters[1]
    }

    fn kernel_hw(&self, k: usize) -> (usize, usize) {
        match self.dims {
            Dims::Image2d => (k, k),
            Dims::Signal1d => (1, k),
        }
    }

    fn stride_hw(&self, s: usize) -> (usize, usize) {
        match self.dims {
            Dims::Image2d => (s, s),
            Dims::Signal1d => (1, s),
        }
    }

    fn pool_hw(&self) -> (usize, usize) {
        match self.dims {
            Dims::Image2d => (2, 2),
            Dims::Signal1d => (1, 2),
        }
    }

    /// Expected input shape `(channels, height, width)`.
    pub fn input_chw(&self) -> (usize, usize, usize) {
        match self.dims {
            Dims::Image2d => (self.in_channels, self.input_size, self.input_size),
            Dims::Signal1d => (self.in_channels, 1, self.input_size),
        }
    }
}

/// Same-padded convolution output size for stride `s`.
fn conv_out(h: usize, s: usize) -> usize {
    (h - 1) / s + 1
}

fn dims4(t: &Tensor) -> Result<(usize, usize, usize, usize), MacnnError> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(MacnnError::ShapeMismatch {
            expected: "rank-4 (n, c, h, w)".to_string(),
            got: format!("{s:?}"),
        }),
    }
}

// ---------------------------------------------------------------------------
// layer operations
// ---------------------------------------------------------------------------

/// Same-padded cross-correlation plus per-channel bias.
///
/// `w` is `(out, in, kh, kw)`, `b` is `(out,)`. Padding is `(k - 1) / 2` per
/// axis, so the stride alone controls the spatial size.
pub fn conv_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: (usize, usize),
) -> Result<Tensor, MacnnError> {
    let (_, ci, _, _) = dims4(x)?;
    let (co, wci, kh, kw) = dims4(w)?;
    if wci != ci || b.shape() != [co] {
        return Err(MacnnError::ShapeMismatch {
            expected: format!("weight (co, {ci}, kh, kw) and bias (co,)"),
            got: format!("weight {:?}, bias {:?}", w.shape(), b.shape()),
        });
    }
    let y = conv2d(x, w, stride, ((kh - 1) / 2, (kw - 1) / 2));
    let (_, _, oh, ow) = dims4(&y)?;
    let bb = b.reshape(&[1, co, 1, 1]);
    Ok(&y + &bb.broadcast_to(&[y.shape()[0], co, oh, ow]))
}

/// Per-window maximum over each channel. No padding: trailing rows or
/// columns that do not fill a window are dropped.
pub fn max_pool(
    x: &Tensor,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<Tensor, MacnnError> {
    let (_, _, h, w) = dims4(x)?;
    if window.0 > h || window.1 > w || stride.0 == 0 || stride.1 == 0 {
        return Err(MacnnError::ShapeMismatch {
            expected: format!("pool window within {h}x{w}"),
            got: format!("window {window:?}, stride {stride:?}"),
        });
    }
    Ok(maxpool2d(x, window, stride))
}

/// Elementwise `max(x, 0)`.
pub fn relu(x: &Tensor) -> Tensor {
    x.relu()
}

/// Instance normalization: per sample and channel, subtract the spatial mean
/// and divide by the spatial standard deviation (guarded by `nu`), then
/// apply the learned per-channel affine `gamma * xhat + alpha`.
pub fn instance_norm(
    x: &Tensor,
    gamma: &Tensor,
    alpha: &Tensor,
    nu: f64,
) -> Result<Tensor, MacnnError> {
    let (n, c, h, w) = dims4(x)?;
    if gamma.shape() != [c] || alpha.shape() != [c] {
        return Err(MacnnError::ShapeMismatch {
            expected: format!("gamma/alpha of shape ({c},)"),
            got: format!("{:?} / {:?}", gamma.shape(), alpha.shape()),
        });
    }
    assert!(nu > 0.0, "instance_norm epsilon must be positive");
    let shape = [n, c, h, w];
    let mean = x.mean_axes(&[2, 3], true).broadcast_to(&shape);
    let centered = x - &mean;
    let var = centered.square().mean_axes(&[2, 3], true).broadcast_to(&shape);
    let xhat = &centered / &var.add_scalar(nu).sqrt();
    let g = gamma.reshape(&[1, c, 1, 1]).broadcast_to(&shape);
    let a = alpha.reshape(&[1, c, 1, 1]).broadcast_to(&shape);
    Ok(&(&g * &xhat) + &a)
}

/// Row-stable softmax: exponentials are taken after subtracting each row's
/// maximum (as a constant, so gradients flow through the logits only).
pub fn softmax(logits: &Tensor) -> Tensor {
    let shape = logits.shape().to_vec();
    assert_eq!(shape.len(), 2, "softmax expects (batch, classes) logits");
    let (n, k) = (shape[0], shape[1]);
    let mut rowmax = ArrayD::zeros(IxDyn(&[n, 1]));
    let data = logits.data();
    for i in 0..n {
        let mut m = f64::NEG_INFINITY;
        for j in 0..k {
            m = m.max(data[[i, j]]);
        }
        rowmax[[i, 0]] = m;
    }
    let shifted = logits - &Tensor::constant(rowmax).broadcast_to(&shape);
    let e = shifted.exp();
    let z = e.sum_axes(&[1], true).broadcast_to(&shape);
    &e / &z
}

/// One convolution stage: pool(relu(instance_norm(conv(x)))).
fn conv_stage(
    x: &Tensor,
    p: &BlockParams,
    stride: (usize, usize),
    pool: (usize, usize),
) -> Result<Tensor, MacnnError> {
    let y = conv_forward(x, &p.w, &p.b, stride)?;
    let y = instance_norm(&y, &p.gamma, &p.alpha, INSTANCE_NORM_EPS)?;
    max_pool(&relu(&y), pool, pool)
}

/// The wide first block: stride-2 convolution with a large kernel, instance
/// norm, ReLU, then a 2-wide stride-2 max pool.
pub fn wide_block(
    x: &Tensor,
    params: &BlockParams,
    config: &MacnnConfig,
) -> Result<Tensor, MacnnError> {
    conv_stage(
        x,
        params,
        config.stride_hw(config.wide_stride),
        config.pool_hw(),
    )
}

/// Squeeze-and-excitation: global-average-pool to one descriptor per
/// channel, push it through the `W2 relu(W1 z)` bottleneck and a sigmoid,
/// and scale each channel of `u` by its weight.
///
/// `w1` is `(c / r, c)`, `w2` is `(c, c / r)`; no biases.
pub fn se_block(u: &Tensor, w1: &Tensor, w2: &Tensor, r: usize) -> Result<Tensor, MacnnError> {
    let (n, c, h, w) = dims4(u)?;
    if c % r != 0 {
        return Err(MacnnError::BadReduction {
            channels: c,
            reduction: r,
        });
    }
    let cr = c / r;
    if w1.shape() != [cr, c] || w2.shape() != [c, cr] {
        return Err(MacnnError::ShapeMismatch {
            expected: format!("W1 ({cr}, {c}), W2 ({c}, {cr})"),
            got: format!("W1 {:?}, W2 {:?}", w1.shape(), w2.shape()),
        });
    }
    let z = u.mean_axes(&[2, 3], false); // (n, c)
    let s = z
        .matmul(&w1.transpose2d())
        .relu()
        .matmul(&w2.transpose2d())
        .sigmoid();
    let s4 = s.reshape(&[n, c, 1, 1]).broadcast_to(&[n, c, h, w]);
    Ok(u * &s4)
}

/// Kernel width for efficient channel attention:
/// `k = floor(log2(C) / gamma + b / gamma)`, bumped to the next odd integer
/// when even (the nearest odd neighbours tie, and ties round up).
pub fn eca_kernel_size(channels: usize, gamma: f64, b: f64) -> usize {
    assert!(channels >= 2, "ECA needs at least 2 channels");
    let raw = ((channels as f64).log2() / gamma + b / gamma).floor() as usize;
    let k = if raw % 2 == 1 { raw } else { raw + 1 };
    k.max(1)
}

/// Efficient channel attention over a batch of channel descriptors
/// `z (n, c)`: a width-`k` one-dimensional convolution (same-padded, single
/// shared filter plus scalar bias) followed by a sigmoid.
pub fn eca_apply(
    z: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    k: usize,
) -> Result<Tensor, MacnnError> {
    let shape = z.shape().to_vec();
    let (n, c) = match *shape {
        [n, c] => (n, c),
        ref s => {
            return Err(MacnnError::ShapeMismatch {
                expected: "descriptors (n, c)".to_string(),
                got: format!("{s:?}"),
            })
        }
    };
    if k % 2 == 0 || k > c {
        return Err(MacnnError::BadKernel { k, channels: c });
    }
    if weight.shape() != [k] || bias.len() != 1 {
        return Err(MacnnError::ShapeMismatch {
            expected: format!("weight ({k},) and scalar bias"),
            got: format!("weight {:?}, bias {:?}", weight.shape(), bias.shape()),
        });
    }
    // The channel axis plays the role of image width; the sliding dot
    // product is then an ordinary same-padded convolution.
    let x = z.reshape(&[n, 1, 1, c]);
    let w = weight.reshape(&[1, 1, 1, k]);
    let y = conv2d(&x, &w, (1, 1), (0, (k - 1) / 2));
    let bb = bias.reshape(&[1, 1, 1, 1]).broadcast_to(&[n, 1, 1, c]);
    Ok((&y + &bb).sigmoid().reshape(&[n, c]))
}

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

/// Convolution stage parameters: kernel, bias, and instance-norm affine.
pub struct BlockParams {
    pub w: Tensor,
    pub b: Tensor,
    pub gamma: Tensor,
    pub alpha: Tensor,
}

/// All network parameters, created in a fixed order (the order is the
/// optimizer-slot contract) with fan-in-scaled weights, zero biases, and
/// identity instance-norm affines.
pub struct MacnnParams {
    pub config: MacnnConfig,
    pub set: ParamSet,
}

impl MacnnParams {
    pub fn init(config: &MacnnConfig, seed: u64) -> Result<Self, MacnnError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        let cfg = config.clone();

        let add_stage = |set: &mut ParamSet,
                         rng: &mut ChaCha8Rng,
                         prefix: &str,
                         cin: usize,
                         cout: usize,
                         (kh, kw): (usize, usize)| {
            set.add_fan_in(
                &format!("{prefix}.conv.w"),
                &[cout, cin, kh, kw],
                cin * kh * kw,
                rng,
            );
            set.add_zeros(&format!("{prefix}.conv.b"), &[cout]);
            set.add_full(&format!("{prefix}.in.gamma"), &[cout], 1.0);
            set.add_zeros(&format!("{prefix}.in.alpha"), &[cout]);
        };

        add_stage(
            &mut set,
            &mut rng,
            "wide",
            cfg.in_channels,
            cfg.wide_filters,
            cfg.kernel_hw(cfg.wide_kernel),
        );

        let r = cfg.se_reduction;
        for &k in &cfg.branch_kernels {
            let mut cin = cfg.wide_filters;
            for (si, &cout) in cfg.stage_filters.iter().enumerate() {
                let prefix = format!("branch{k}.stage{}", si + 1);
                add_stage(&mut set, &mut rng, &prefix, cin, cout, cfg.kernel_hw(k));
                set.add_fan_in(&format!("{prefix}.se.w1"), &[cout / r, cout], cout, &mut rng);
                set.add_fan_in(&format!("{prefix}.se.w2"), &[cout, cout / r], cout / r, &mut rng);
                cin = cout;
            }
        }

        let ke = eca_kernel_size(cfg.fused_channels(), cfg.eca_gamma, cfg.eca_b);
        set.add_fan_in("eca.w", &[ke], ke, &mut rng);
        set.add_zeros("eca.b", &[1]);

        let fused = cfg.fused_channels();
        set.add_fan_in("head.w", &[cfg.num_classes, fused], fused, &mut rng);
        set.add_zeros("head.b", &[cfg.num_classes]);

        Ok(MacnnParams { config: cfg, set })
    }

    pub fn num_params(&self) -> usize {
        self.set.num_values()
    }

    fn tensor(&self, name: &str) -> Tensor {
        self.set
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name:?}"))
            .tensor()
    }

    fn block(&self, prefix: &str) -> BlockParams {
        BlockParams {
            w: self.tensor(&format!("{prefix}.conv.w")),
            b: self.tensor(&format!("{prefix}.conv.b")),
            gamma: self.tensor(&format!("{prefix}.in.gamma")),
            alpha: self.tensor(&format!("{prefix}.in.alpha")),
        }
    }
}

// ---------------------------------------------------------------------------
// forward pass
// ---------------------------------------------------------------------------

/// Stack encoded images into an `(n, c, p, p)` batch tensor.
pub fn images_to_batch(images: &[GafImage], config: &MacnnConfig) -> Result<Tensor, MacnnError> {
    batch_from_refs(&images.iter().collect::<Vec<_>>(), config)
}

pub(crate) fn batch_from_refs(
    images: &[&GafImage],
    config: &MacnnConfig,
) -> Result<Tensor, MacnnError> {
    let (c, h, w) = config.input_chw();
    let mut data = ArrayD::zeros(IxDyn(&[images.len(), c, h, w]));
    for (i, &im) in images.iter().enumerate() {
        if config.dims != Dims::Image2d || im.p() != h || c != 1 {
            return Err(MacnnError::ShapeMismatch {
                expected: format!("{c}x{h}x{w} images"),
                got: format!("1x{}x{} image at index {i}", im.p(), im.pixels.ncols()),
            });
        }
        for ((r, cc), &v) in im.pixels.indexed_iter() {
            data[[i, 0, r, cc]] = v;
        }
    }
    Ok(Tensor::constant(data))
}

/// Stack raw windows into an `(n, 1, 1, len)` batch tensor for 1-D mode.
pub fn windows_to_batch(
    windows: &[SignalWindow],
    config: &MacnnConfig,
) -> Result<Tensor, MacnnError> {
    let (c, h, w) = config.input_chw();
    let mut data = ArrayD::zeros(IxDyn(&[windows.len(), c, h, w]));
    for (i, win) in windows.iter().enumerate() {
        if config.dims != Dims::Signal1d || win.values.len() != w || c != 1 {
            return Err(MacnnError::ShapeMismatch {
                expected: format!("windows of {w} samples"),
                got: format!("{} samples at index {i}", win.values.len()),
            });
        }
        for (j, &v) in win.values.iter().enumerate() {
            data[[i, 0, 0, j]] = v;
        }
    }
    Ok(Tensor::constant(data))
}

/// Full forward pass on a prepared batch tensor. Returns the logits
/// `(n, num_classes)` and the post-pooling embeddings `(n, fused_channels)`
/// that feed the head (the representation used for visualization).
pub fn forward_tensor(
    x: &Tensor,
    params: &MacnnParams,
) -> Result<(Tensor, Tensor), MacnnError> {
    let cfg = &params.config;
    let (_, c, h, w) = dims4(x)?;
    let want = cfg.input_chw();
    if (c, h, w) != want {
        return Err(MacnnError::ShapeMismatch {
            expected: format!("input {want:?}"),
            got: format!("({c}, {h}, {w})"),
        });
    }

    let y = wide_block(x, &params.block("wide"), cfg)?;

    let pool = cfg.pool_hw();
    let unit = cfg.stride_hw(1);
    let r = cfg.se_reduction;
    let mut branches = Vec::with_capacity(3);
    for &k in &cfg.branch_kernels {
        let mut t = y.clone();
        for si in 1..=cfg.stage_filters.len() {
            let prefix = format!("branch{k}.stage{si}");
            t = conv_stage(&t, &params.block(&prefix), unit, pool)?;
            t = se_block(
                &t,
                &params.tensor(&format!("{prefix}.se.w1")),
                &params.tensor(&format!("{prefix}.se.w2")),
                r,
            )?;
        }
        branches.push(t);
    }
    let fused = concat(&branches, 1);

    // ECA fusion: weight the concatenated channels, then pool globally.
    let ke = eca_kernel_size(cfg.fused_channels(), cfg.eca_gamma, cfg.eca_b);
    let z = fused.mean_axes(&[2, 3], false);
    let weights = eca_apply(&z, &params.tensor("eca.w"), &params.tensor("eca.b"), ke)?;
    let fshape = fused.shape().to_vec();
    let w4 = weights
        .reshape(&[fshape[0], fshape[1], 1, 1])
        .broadcast_to(&fshape);
    let attended = &fused * &w4;

    let embedding = attended.mean_axes(&[2, 3], false);
    let logits = &embedding.matmul(&params.tensor("head.w").transpose2d())
        + &params
            .tensor("head.b")
            .reshape(&[1, cfg.num_classes])
            .broadcast_to(&[fshape[0], cfg.num_classes]);

    if !logits.all_finite() {
        return Err(MacnnError::NonFiniteActivation);
    }
    Ok((logits, embedding))
}

/// Logits for a batch of encoded images.
pub fn macnn_forward(images: &[GafImage], params: &MacnnParams) -> Result<Tensor, MacnnError> {
    let x = images_to_batch(images, &params.config)?;
    forward_tensor(&x, params).map(|(logits, _)| logits)
}

/// Class predictions with their probability rows.
pub fn predict(
    checkpoint: &ClassifierCheckpoint,
    images: &[GafImage],
) -> Result<(Vec<usize>, ndarray::Array2<f64>), MacnnError> {
    let params = checkpoint.best_params()?;
    let n = images.len();
    let k = params.config.num_classes;
    let mut labels = Vec::with_capacity(n);
    let mut probs = ndarray::Array2::zeros((n, k));
    for (start, chunk) in images.chunks(32).enumerate().map(|(i, c)| (i * 32, c)) {
        let logits = macnn_forward(chunk, &params)?;
        let p = softmax(&logits);
        let pd = p.data();
        for i in 0..chunk.len() {
            let mut best = 0;
            for j in 0..k {
                probs[(start + i, j)] = pd[[i, j]];
                if pd[[i, j]] > pd[[i, best]] {
                    best = j;
                }
            }
            labels.push(best);
        }
    }
    Ok((labels, probs))
}

/// Convenience used by training and tests: parameter gradients of a scalar.
pub(crate) fn param_grads(loss: &Tensor, set: &ParamSet) -> Vec<Tensor> {
    let tensors = set.tensors();
    let refs: Vec<&Tensor> = tensors.iter().collect();
    grad(loss, &refs)
}
