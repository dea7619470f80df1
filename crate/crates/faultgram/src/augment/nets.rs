//! Generator and critic architectures.
//!
//! Both are small stride-2 convolutional stacks sized by `image_size` and
//! `base_channels`. The generator projects the latent vector to a 4x4
//! feature map and doubles the resolution per block up to the image size,
//! ending in tanh. The critic mirrors it downward with leaky-ReLU
//! activations and deliberately no normalization anywhere: the gradient
//! penalty is defined on per-sample critic gradients, which cross-sample
//! normalization would entangle.

use super::{AugmentError, GanTrainConfig};
use crate::autodiff::{conv2d, conv_transpose2d, ParamSet, Tensor};
use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const KERNEL: usize = 4;
const NEGATIVE_SLOPE: f64 = 0.2;

/// Number of resolution-doubling blocks between 4x4 and the image size.
pub(super) fn levels(image_size: usize) -> usize {
    (image_size / 4).trailing_zeros() as usize
}

/// Channel width at the 4x4 bottleneck.
fn widest(config: &GanTrainConfig) -> usize {
    config.base_channels << (levels(config.image_size) - 1)
}

pub struct GeneratorNet {
    pub set: ParamSet,
    z_dim: usize,
    image_size: usize,
    widest: usize,
}

impl GeneratorNet {
    pub fn init(config: &GanTrainConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        let c0 = widest(config);
        set.add_fan_in("fc.w", &[config.z_dim, c0 * 16], config.z_dim, &mut rng);
        set.add_zeros("fc.b", &[c0 * 16]);
        let mut cin = c0;
        for i in 0..levels(config.image_size) {
            let cout = if cin > config.base_channels { cin / 2 } else { 1 };
            set.add_fan_in(
                &format!("up{i}.w"),
                &[cin, cout, KERNEL, KERNEL],
                cin * KERNEL * KERNEL,
                &mut rng,
            );
            set.add_zeros(&format!("up{i}.b"), &[cout]);
            cin = cout;
        }
        GeneratorNet {
            set,
            z_dim: config.z_dim,
            image_size: config.image_size,
            widest: c0,
        }
    }

    pub fn from_arrays(
        arrays: &[(String, ArrayD<f64>)],
        config: &GanTrainConfig,
    ) -> Result<Self, AugmentError> {
        let net = GeneratorNet::init(config, 0);
        restore(&net.set, arrays, "generator")?;
        Ok(net)
    }

    /// Map latent vectors `(n, z_dim)` to images `(n, 1, P, P)` in
    /// `[-1, 1]`.
    pub fn forward(&self, z: &Tensor) -> Tensor {
        let n = z.shape()[0];
        assert_eq!(z.shape(), &[n, self.z_dim], "latent batch shape");
        let h = z.matmul(&self.tensor("fc.w"));
        let h = &h + &bias_row(&self.tensor("fc.b"), n);
        let mut x = h.reshape(&[n, self.widest, 4, 4]).relu();
        let blocks = levels(self.image_size);
        for i in 0..blocks {
            let w = self.tensor(&format!("up{i}.w"));
            let b = self.tensor(&format!("up{i}.b"));
            let (hh, ww) = (x.shape()[2] * 2, x.shape()[3] * 2);
            let y = conv_transpose2d(&x, &w, (2, 2), (1, 1), (hh, ww));
            let y = &y + &bias_map(&b, y.shape());
            x = if i + 1 == blocks { y.tanh() } else { y.relu() };
        }
        x
    }

    fn tensor(&self, name: &str) -> Tensor {
        self.set.get(name).expect("generator parameter").tensor()
    }
}

pub struct CriticNet {
    pub set: ParamSet,
    image_size: usize,
    widest: usize,
}

impl CriticNet {
    pub fn init(config: &GanTrainConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        let mut cin = 1;
        let mut cout = config.base_channels;
        for i in 0..levels(config.image_size) {
            set.add_fan_in(
                &format!("down{i}.w"),
                &[cout, cin, KERNEL, KERNEL],
                cin * KERNEL * KERNEL,
                &mut rng,
            );
            set.add_zeros(&format!("down{i}.b"), &[cout]);
            cin = cout;
            cout *= 2;
        }
        let c0 = widest(config);
        set.add_fan_in("head.w", &[c0 * 16, 1], c0 * 16, &mut rng);
        set.add_zeros("head.b", &[1]);
        CriticNet {
            set,
            image_size: config.image_size,
            widest: c0,
        }
    }

    pub fn from_arrays(
        arrays: &[(String, ArrayD<f64>)],
        config: &GanTrainConfig,
    ) -> Result<Self, AugmentError> {
        let net = CriticNet::init(config, 0);
        restore(&net.set, arrays, "critic")?;
        Ok(net)
    }

    /// Score images `(n, 1, P, P)`; returns `(n, 1)`.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let n = x.shape()[0];
        assert_eq!(
            x.shape(),
            &[n, 1, self.image_size, self.image_size],
            "critic input shape"
        );
        let mut h = x.clone();
        for i in 0..levels(self.image_size) {
            let w = self.tensor(&format!("down{i}.w"));
            let b = self.tensor(&format!("down{i}.b"));
            let y = conv2d(&h, &w, (2, 2), (1, 1));
            h = (&y + &bias_map(&b, y.shape())).leaky_relu(NEGATIVE_SLOPE);
        }
        let flat = h.reshape(&[n, self.widest * 16]);
        &flat.matmul(&self.tensor("head.w")) + &bias_row(&self.tensor("head.b"), n)
    }

    fn tensor(&self, name: &str) -> Tensor {
        self.set.get(name).expect("critic parameter").tensor()
    }
}

fn bias_row(b: &Tensor, n: usize) -> Tensor {
    let m = b.len();
    b.reshape(&[1, m]).broadcast_to(&[n, m])
}

fn bias_map(b: &Tensor, shape: &[usize]) -> Tensor {
    b.reshape(&[1, shape[1], 1, 1]).broadcast_to(shape)
}

/// Overwrite a freshly built set's values with checkpoint arrays. Names and
/// shapes must match the architecture exactly.
fn restore(
    set: &ParamSet,
    arrays: &[(String, ArrayD<f64>)],
    which: &str,
) -> Result<(), AugmentError> {
    if arrays.len() != set.len() {
        return Err(AugmentError::BadCheckpoint {
            reason: format!(
                "{which}: {} arrays for {} parameters",
                arrays.len(),
                set.len()
            ),
        });
    }
    for (param, (name, data)) in set.iter().zip(arrays) {
        if param.name() != name || param.tensor().shape() != data.shape() {
            return Err(AugmentError::BadCheckpoint {
                reason: format!(
                    "{which}: expected {} {:?}, found {} {:?}",
                    param.name(),
                    param.tensor().shape(),
                    name,
                    data.shape()
                ),
            });
        }
        param.set_data(data.clone());
    }
    Ok(())
}
