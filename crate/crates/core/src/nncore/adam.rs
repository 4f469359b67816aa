//! Adam with bias correction and the per-epoch exponential learning-rate
//! decay used by the training loop.

use ndarray::ArrayD;

use super::element::Element;
use super::graph::NnError;
use super::params::ParamStore;

/// Optimizer hyperparameters. `lr0` decays by `decay` each epoch.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr0: f64,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr0: 3e-4,
            decay: 0.97,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    /// Learning rate for epoch `e`: `lr0 * decay^e`.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay.powi(epoch as i32)
    }
}

/// First/second moment state for the trainable entries of one store.
pub struct AdamState<E: Element> {
    cfg: AdamConfig,
    m: Vec<ArrayD<E>>,
    v: Vec<ArrayD<E>>,
    trainable: Vec<usize>,
    step: u64,
}

impl<E: Element> AdamState<E> {
    pub fn new(store: &ParamStore<E>, cfg: AdamConfig) -> Self {
        let trainable: Vec<usize> = store
            .entries()
            .iter()
            .enumerate()
            .filter(|(_, e)| e.trainable)
            .map(|(i, _)| i)
            .collect();
        let m = trainable
            .iter()
            .map(|&i| ArrayD::zeros(store.entries()[i].value.raw_dim()))
            .collect();
        let v = trainable
            .iter()
            .map(|&i| ArrayD::zeros(store.entries()[i].value.raw_dim()))
            .collect();
        AdamState {
            cfg,
            m,
            v,
            trainable,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    /// One update. `grads` is indexed like `store.entries()`; non-trainable
    /// slots are ignored and missing gradients are treated as zero.
    pub fn step(
        &mut self,
        store: &mut ParamStore<E>,
        grads: &[Option<ArrayD<E>>],
        lr: f64,
    ) -> Result<(), NnError> {
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        for (k, &idx) in self.trainable.iter().enumerate() {
            let Some(grad) = grads.get(idx).and_then(|g| g.as_ref()) else {
                continue;
            };
            let entry_name = store.entries()[idx].name.clone();
            if grad.shape() != store.entries()[idx].value.shape() {
                return Err(NnError::ParamGradMismatch {
                    name: entry_name,
                    param: store.entries()[idx].value.shape().to_vec(),
                    grad: grad.shape().to_vec(),
                });
            }
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            let param = store.value_mut(super::params::ParamId(idx));
            for ((p, g), (m, v)) in param
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = g.as_f64();
                let mn = b1 * m.as_f64() + (1.0 - b1) * g;
                let vn = b2 * v.as_f64() + (1.0 - b2) * g * g;
                *m = E::from_f64(mn);
                *v = E::from_f64(vn);
                let mhat = mn / bias1;
                let vhat = vn / bias2;
                *p = E::from_f64(p.as_f64() - lr * mhat / (vhat.sqrt() + self.cfg.eps));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn lr_schedule_matches_decay_formula() {
        let cfg = AdamConfig::default();
        assert!((cfg.lr_for_epoch(0) - 0.0003).abs() < 1e-12);
        assert!((cfg.lr_for_epoch(1) - 0.000291).abs() < 1e-9);
        assert!((cfg.lr_for_epoch(2) - 0.00028227).abs() < 1e-9);
    }

    #[test]
    fn one_step_descends_parabola() {
        // f(x) = x^2 from x = 1; a step must decrease f.
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", ArrayD::from_elem(IxDyn(&[1]), 1.0), true);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let grad = ArrayD::from_elem(IxDyn(&[1]), 2.0); // df/dx at 1
        adam.step(&mut store, &[Some(grad)], 0.0003).unwrap();
        let xv = store.value(x)[[0]];
        assert!(xv < 1.0 && xv * xv < 1.0, "x after step: {xv}");
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", ArrayD::zeros(IxDyn(&[2, 2])), true);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let bad = ArrayD::zeros(IxDyn(&[3]));
        let err = adam.step(&mut store, &[Some(bad)], 1e-3).unwrap_err();
        assert!(err.to_string().contains("w"), "{err}");
    }

    #[test]
    fn converges_on_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", ArrayD::from_elem(IxDyn(&[1]), 1.0), true);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        for _ in 0..2000 {
            let g = 2.0 * store.value(x)[[0]];
            adam.step(&mut store, &[Some(ArrayD::from_elem(IxDyn(&[1]), g))], 0.01)
                .unwrap();
        }
        assert!(store.value(x)[[0]].abs() < 1e-3);
    }
}
