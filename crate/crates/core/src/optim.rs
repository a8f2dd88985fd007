//! First-order optimizers over a [`ParamStore`].

use alloc::vec::Vec;

use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64, t: i32, moments: Vec<Option<(Tensor, Tensor)>> },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moments: Vec::new() },
        }
    }

    /// Applies one update; `grads[i]` belongs to parameter `i` of `store`.
    /// Parameters without a gradient, or frozen, are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in store.iter_mut().zip(grads) {
                    if let (true, Some(g)) = (p.trainable, g) {
                        for (w, d) in p.value.data_mut().iter_mut().zip(g.data()) {
                            *w -= *lr * d;
                        }
                    }
                }
            }
            Optimizer::Adam { lr, beta1, beta2, eps, t, moments } => {
                *t += 1;
                let c1 = 1.0 - libm::pow(*beta1, f64::from(*t));
                let c2 = 1.0 - libm::pow(*beta2, f64::from(*t));
                moments.resize(grads.len(), None);
                for ((p, g), slot) in store.iter_mut().zip(grads).zip(moments.iter_mut()) {
                    let (true, Some(g)) = (p.trainable, g) else { continue };
                    let (m, v) = slot.get_or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
                    let it = p.value.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
                    for ((w, &d), (mi, vi)) in it {
                        *mi = *beta1 * *mi + (1.0 - *beta1) * d;
                        *vi = *beta2 * *vi + (1.0 - *beta2) * d * d;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *w -= *lr * mhat / (libm::sqrt(vhat) + *eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn sgd_moves_against_gradient() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(vec![1.0, 2.0]), true);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5);
        opt.step(&mut s, &[Some(Tensor::vector(vec![2.0, -2.0]))]);
        assert_eq!(s.value(crate::param::ParamId(0)).data(), &[0.0, 3.0]);
    }

    #[test]
    fn adam_first_step_has_lr_magnitude() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(vec![0.0]), true);
        s.add("frozen", Tensor::vector(vec![0.0]), false);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01);
        opt.step(&mut s, &[Some(Tensor::vector(vec![3.0])), Some(Tensor::vector(vec![3.0]))]);
        assert!((s.value(crate::param::ParamId(0)).data()[0] + 0.01).abs() < 1e-9);
        assert_eq!(s.value(crate::param::ParamId(1)).data()[0], 0.0);
    }
}
