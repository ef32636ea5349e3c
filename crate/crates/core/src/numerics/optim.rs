use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};
use super::tensor::Tensor;
use super::NumericsError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// AdamW with decoupled weight decay.
///
/// ```text
/// p <- p - lr * wd * p
/// m <- b1 m + (1 - b1) g
/// v <- b2 v + (1 - b2) g^2
/// p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// ```
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let init = |id| {
            (store.kind(id) == super::ParamKind::Trainable)
                .then(|| Tensor::zeros(store.get(id).shape()))
        };
        Self {
            config,
            step: 0,
            first: store.ids().map(init).collect(),
            second: store.ids().map(init).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update and zeroes `grads`. Nothing is modified when any
    /// gradient is non-finite.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &mut Gradients,
    ) -> Result<(), NumericsError> {
        for id in store.trainable_ids() {
            if grads.get(id).has_non_finite() {
                return Err(NumericsError::NonFiniteGradient {
                    param: store.name(id).to_string(),
                });
            }
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.trainable_ids().collect();
        for id in ids {
            let g = grads.get(id);
            let m = self.first[id.index()]
                .as_mut()
                .expect("moment buffer for trainable parameter");
            let v = self.second[id.index()]
                .as_mut()
                .expect("moment buffer for trainable parameter");
            let p = store.get_mut(id);
            for (((pv, mv), vv), gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *pv -= lr * weight_decay * *pv;
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                *pv -= lr * (*mv / bc1) / ((*vv / bc2).sqrt() + eps);
            }
        }
        grads.zero();
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has not
/// improved for `patience` consecutive epochs.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    best: f64,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Returns true when the learning rate was reduced.
    pub fn observe(&mut self, loss: f64, opt: &mut AdamW) -> bool {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            opt.set_lr(opt.lr() * self.factor);
            self.stale = 0;
            return true;
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Graph;

    fn scalar_store(v: f64) -> (ParamStore, crate::numerics::ParamId) {
        let mut store = ParamStore::new();
        let id = store.trainable("p", Tensor::scalar(v));
        (store, id)
    }

    #[test]
    fn zero_gradient_without_decay_leaves_parameters() {
        let (mut store, id) = scalar_store(1.5);
        let mut opt = AdamW::new(
            &store,
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        let mut grads = Gradients::zeros_like(&store);
        opt.step(&mut store, &mut grads).unwrap();
        assert_eq!(store.get(id).item(), 1.5);
    }

    #[test]
    fn one_step_on_square_descends() {
        let (mut store, id) = scalar_store(1.0);
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        let mut g = Graph::new();
        let p = g.param(&store, id);
        let loss = g.hadamard(p, p).unwrap();
        let mut grads = g.backward(loss, &store).unwrap();
        opt.step(&mut store, &mut grads).unwrap();
        assert!(store.get(id).item() < 1.0);
        assert!(grads.is_zero(), "gradients are cleared after the update");
    }

    #[test]
    fn converges_on_shifted_square() {
        let (mut store, id) = scalar_store(0.0);
        let mut opt = AdamW::new(
            &store,
            AdamWConfig {
                lr: 0.1,
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        for _ in 0..200 {
            let mut g = Graph::new();
            let p = g.param(&store, id);
            let target = Tensor::scalar(3.0);
            let loss = g.mse_loss(p, &target, None).unwrap();
            let mut grads = g.backward(loss, &store).unwrap();
            opt.step(&mut store, &mut grads).unwrap();
        }
        assert!((store.get(id).item() - 3.0).abs() < 0.5);
        assert_eq!(opt.steps(), 200);
    }

    #[test]
    fn nan_gradient_is_rejected_with_parameter_name() {
        let (mut store, _) = scalar_store(1.0);
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        let mut g = Graph::new();
        let p = g.param(&store, store.id_of("p").unwrap());
        let bad = g.custom(
            &[p],
            Tensor::scalar(0.0),
            Box::new(|_, _, _| vec![Tensor::scalar(f64::NAN)]),
        );
        let mut grads = g.backward(bad, &store).unwrap();
        let err = opt.step(&mut store, &mut grads).unwrap_err();
        assert!(err.to_string().contains("parameter p"), "{err}");
        assert_eq!(store.get(store.id_of("p").unwrap()).item(), 1.0);
    }

    #[test]
    fn plateau_reduces_after_patience() {
        let (store, _) = scalar_store(0.0);
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        let mut sched = PlateauScheduler::new(0.1, 2);
        assert!(!sched.observe(1.0, &mut opt));
        assert!(!sched.observe(1.0, &mut opt));
        assert!(sched.observe(1.0, &mut opt));
        assert!((opt.lr() - 1e-5).abs() < 1e-18);
    }
}
