use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamStore};
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn build<T: Scalar>(self) -> Box<dyn Optimizer<T>> {
        match self {
            OptimizerKind::Sgd => Box::new(Sgd),
            OptimizerKind::Adam => Box::new(Adam::default()),
        }
    }
}

/// Applies one update to every trainable parameter that received a gradient.
pub trait Optimizer<T: Scalar>: Send {
    fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>, lr: f64);
}

/// Plain gradient descent, no momentum.
#[derive(Debug, Default, Clone, Copy)]
pub struct Sgd;

impl<T: Scalar> Optimizer<T> for Sgd {
    fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) {
        let lr = lit::<T>(lr);
        for (id, g) in grads.iter() {
            if store.is_trainable(id) {
                store
                    .value_mut(id)
                    .zip_mut_with(g, |p, &d| *p -= lr * d);
            }
        }
    }
}

/// Adam with bias correction folded into the step size and epsilon outside
/// the square root, matching the common framework formulation.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: i32,
    moments: Vec<Option<(ArrayD<T>, ArrayD<T>)>>,
}

impl<T> Default for Adam<T> {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            t: 0,
            moments: Vec::new(),
        }
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) {
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        self.t += 1;
        let corrected = lr * (1.0 - self.beta2.powi(self.t)).sqrt() / (1.0 - self.beta1.powi(self.t));
        let (b1, b2, eps, step) = (
            lit::<T>(self.beta1),
            lit::<T>(self.beta2),
            lit::<T>(self.epsilon),
            lit::<T>(corrected),
        );
        let one = T::one();
        for (id, g) in grads.iter() {
            if !store.is_trainable(id) {
                continue;
            }
            let (m, v) = self.moments[id.0].get_or_insert_with(|| (ArrayD::zeros(g.raw_dim()), ArrayD::zeros(g.raw_dim())));
            Zip::from(store.value_mut(id))
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &d| {
                    *m = b1 * *m + (one - b1) * d;
                    *v = b2 * *v + (one - b2) * d * d;
                    *p -= step * *m / (v.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamRole;
    use ndarray::IxDyn;

    /// Minimize (p - 3)^2 from 0.
    fn descend(kind: OptimizerKind, lr: f64, steps: usize) -> f64 {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("p", ArrayD::zeros(IxDyn(&[1])), ParamRole::Weight);
        let mut opt = kind.build::<f64>();
        for _ in 0..steps {
            let p = store.value(id)[[0]];
            let mut grads = Grads::for_store(&store);
            grads.accumulate(id, ArrayD::from_elem(IxDyn(&[1]), 2.0 * (p - 3.0)));
            opt.step(&mut store, &grads, lr);
        }
        store.value(id)[[0]]
    }

    #[test]
    fn both_optimizers_converge_on_a_quadratic() {
        assert!((descend(OptimizerKind::Sgd, 0.1, 200) - 3.0).abs() < 1e-6);
        assert!((descend(OptimizerKind::Adam, 0.05, 2000) - 3.0).abs() < 1e-3);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // bias-corrected first step has magnitude lr regardless of gradient scale
        let p = descend(OptimizerKind::Adam, 0.01, 1);
        assert!((p - 0.01).abs() < 1e-6);
    }

    #[test]
    fn frozen_parameters_never_move() {
        let mut store = ParamStore::<f32>::new();
        let id = store.insert("p", ArrayD::ones(IxDyn(&[3])), ParamRole::Weight);
        store.set_frozen(true);
        let mut grads = Grads::for_store(&store);
        grads.accumulate(id, ArrayD::ones(IxDyn(&[3])));
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            kind.build::<f32>().step(&mut store, &grads, 1.0);
        }
        assert!(store.value(id).iter().all(|&v| v == 1.0));
    }
}
