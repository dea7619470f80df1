//! Adam optimizer operating on a [`ParamSet`].

use super::{ParamSet, Tensor};
use ndarray::ArrayD;

/// Adam with bias-corrected first/second moments.
///
/// The moment buffers are keyed by parameter order, so the same `ParamSet`
/// (or one reconstructed in the same order from a checkpoint) must be passed
/// to every call. State is exposed for checkpointing so interrupted training
/// resumes with identical trajectories.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64, beta1: f64, beta2: f64) -> Self {
        let m = params
            .iter()
            .map(|p| ArrayD::zeros(p.tensor().data().raw_dim()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step_count: 0,
            m,
            v,
        }
    }

    /// Apply one update from `grads` (one per parameter, in set order).
    pub fn step(&mut self, params: &ParamSet, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len(), "adam: gradient count");
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);

        for (i, (param, grad)) in params.iter().zip(grads).enumerate() {
            let g = grad.data();
            assert_eq!(
                g.shape(),
                param.tensor().shape(),
                "adam: gradient shape for {}",
                param.name()
            );
            self.m[i].zip_mut_with(g, |m, &gv| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * gv;
            });
            self.v[i].zip_mut_with(g, |v, &gv| {
                *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv;
            });

            let mut new = param.tensor().data().clone();
            ndarray::Zip::from(&mut new)
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|p, &m, &v| {
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                });
            param.set_data(new);
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Snapshot of `(step_count, first moments, second moments)` for
    /// checkpoints.
    pub fn state(&self) -> (u64, &[ArrayD<f64>], &[ArrayD<f64>]) {
        (self.step_count, &self.m, &self.v)
    }

    /// Restore a snapshot taken by [`Adam::state`].
    pub fn load_state(&mut self, step_count: u64, m: Vec<ArrayD<f64>>, v: Vec<ArrayD<f64>>) {
        assert_eq!(m.len(), self.m.len(), "adam: moment count");
        assert_eq!(v.len(), self.v.len(), "adam: moment count");
        for (cur, new) in self.m.iter().zip(&m) {
            assert_eq!(cur.shape(), new.shape(), "adam: moment shape");
        }
        self.step_count = step_count;
        self.m = m;
        self.v = v;
    }
}
