//! Adam with decoupled weight decay, and global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: parameters shrink by `lr * weight_decay` before each update.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn with_weight_decay(self, weight_decay: f64) -> Self {
        AdamConfig { weight_decay, ..self }
    }
}

/// Moment buffers for one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.rows(), p.value.cols())).collect();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected update. Nothing changes if any gradient is
    /// non-finite or mis-shaped.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::invalid(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (p, g) in store.iter().zip(grads) {
            if g.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    left: p.value.shape(),
                    right: g.shape(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
            }
        }
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let decay = 1.0 - c.lr * c.weight_decay;
        for (((p, g), m), v) in store.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let params = p.value.data_mut();
            for (((x, &g), m), v) in params
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                if c.weight_decay != 0.0 {
                    *x *= decay;
                }
                *x -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt()
}

/// Rescales every gradient by `max_norm / norm` when the joint l2 norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::invalid(format!("max_norm {max_norm} must be positive")));
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::row_vector(values.to_vec()));
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(&[0.5, -2.0]);
        let mut adam = Adam::new(&s, AdamConfig::new(1e-3));
        adam.update(&mut s, &[Tensor::row_vector(vec![1.0, -1.0])]).unwrap();
        let want = 1e-3 / (1.0 + 1e-8);
        let got = s.iter().next().unwrap().value.data().to_vec();
        assert!((0.5 - got[0] - want).abs() < 1e-15);
        assert!((got[1] + 2.0 - want).abs() < 1e-15);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store(&[0.5, -2.0]);
        let before = s.clone();
        let mut adam = Adam::new(&s, AdamConfig::new(1e-3));
        for _ in 0..5 {
            adam.update(&mut s, &[Tensor::zeros(1, 2)]).unwrap();
        }
        assert_eq!(s, before);
    }

    #[test]
    fn weight_decay_shrinks_before_the_step() {
        let mut s = store(&[2.0]);
        let cfg = AdamConfig::new(0.1).with_weight_decay(0.5);
        let mut adam = Adam::new(&s, cfg);
        adam.update(&mut s, &[Tensor::zeros(1, 1)]).unwrap();
        assert!((s.iter().next().unwrap().value.item() - 2.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_without_change() {
        let mut s = store(&[1.0, 1.0]);
        let before = s.clone();
        let mut adam = Adam::new(&s, AdamConfig::new(1e-3));
        let r = adam.update(&mut s, &[Tensor::row_vector(vec![0.1, f64::NAN])]);
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert_eq!(s, before);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn replaying_gradients_is_bitwise_reproducible() {
        let grads: Vec<Tensor> = (0..100)
            .map(|i| Tensor::row_vector(vec![(i as f64 * 0.3).sin(), (i as f64 * 1.7).cos()]))
            .collect();
        let run = || {
            let mut s = store(&[0.1, 0.2]);
            let mut adam = Adam::new(&s, AdamConfig::new(4e-4).with_weight_decay(1e-5));
            for g in &grads {
                adam.update(&mut s, std::slice::from_ref(g)).unwrap();
            }
            s
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clip_halves_norm_ten() {
        let mut g = vec![Tensor::row_vector(vec![6.0]), Tensor::row_vector(vec![8.0])];
        let before = clip_global_norm(&mut g, 5.0).unwrap();
        assert_eq!(before, 10.0);
        assert_eq!(g[0].item(), 3.0);
        assert_eq!(g[1].item(), 4.0);
    }

    #[test]
    fn clip_below_threshold_is_identity() {
        let mut g = vec![Tensor::row_vector(vec![0.6, 0.8])];
        clip_global_norm(&mut g, 5.0).unwrap();
        assert_eq!(g[0].data(), &[0.6, 0.8]);
        assert!(clip_global_norm(&mut g, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn clipped_norm_never_exceeds_max(
            values in proptest::collection::vec(-1e3f64..1e3, 1..40),
            max in 1e-3f64..100.0,
        ) {
            let mut g = vec![Tensor::row_vector(values)];
            clip_global_norm(&mut g, max).unwrap();
            prop_assert!(global_norm(&g) <= max + 1e-9);
        }

        #[test]
        fn second_moments_stay_non_negative(
            gs in proptest::collection::vec(-10f64..10.0, 1..30),
        ) {
            let mut s = store(&[0.0]);
            let mut adam = Adam::new(&s, AdamConfig::new(1e-3));
            for g in gs {
                adam.update(&mut s, &[Tensor::scalar(g)]).unwrap();
                prop_assert!(adam.v[0].item() >= 0.0);
            }
        }
    }
}
