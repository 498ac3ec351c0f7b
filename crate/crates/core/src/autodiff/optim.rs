use std::collections::BTreeSet;

use super::graph::ParamGrads;
use super::params::{Group, ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW) weight decay.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Tensor<T>,
    v: Tensor<T>,
    steps: u64,
}

/// AdamW state. Moments are created lazily, per parameter, the first time
/// that parameter is updated.
#[derive(Clone, Debug, Default)]
pub struct Adam<T> {
    moments: Vec<Option<Moments<T>>>,
}

impl<T: Real> Adam<T> {
    pub fn new() -> Self {
        Adam { moments: Vec::new() }
    }

    /// Apply one update to every parameter whose group is in `mask`.
    /// Parameters outside the mask, and their moments, are left untouched.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &ParamGrads<T>,
        cfg: &AdamConfig,
        mask: &BTreeSet<Group>,
    ) -> Result<()> {
        if !(cfg.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", cfg.lr)));
        }
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        let ids: Vec<ParamId> = params.iter().filter(|(_, p)| mask.contains(&p.group)).map(|(id, _)| id).collect();
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let (lr, eps, wd) = (T::lit(cfg.lr), T::lit(cfg.eps), T::lit(cfg.weight_decay));
        for id in ids {
            let shape = params.value(id).shape();
            let zero_grad;
            let g = match grads.get(id) {
                Some(g) => g,
                None => {
                    zero_grad = Tensor::zeros(shape.0, shape.1);
                    &zero_grad
                }
            };
            let slot = self.moments[id.index()].get_or_insert_with(|| Moments {
                m: Tensor::zeros(shape.0, shape.1),
                v: Tensor::zeros(shape.0, shape.1),
                steps: 0,
            });
            slot.steps += 1;
            let bc1 = T::one() - b1.powi(slot.steps as i32);
            let bc2 = T::one() - b2.powi(slot.steps as i32);
            let value = params.value_mut(id);
            let it = value
                .data_mut()
                .iter_mut()
                .zip(slot.m.data_mut().iter_mut())
                .zip(slot.v.data_mut().iter_mut())
                .zip(g.data());
            for (((p, m), v), &gi) in it {
                *m = b1 * *m + (T::one() - b1) * gi;
                *v = b2 * *v + (T::one() - b2) * gi * gi;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p = *p - lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
            }
        }
        Ok(())
    }
}

pub fn all_groups() -> BTreeSet<Group> {
    [Group::Backbone, Group::AdaLn].into_iter().collect()
}

pub fn adaln_only() -> BTreeSet<Group> {
    [Group::AdaLn].into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> (ParamStore<f64>, ParamId, ParamId) {
        let mut s = ParamStore::new();
        let a = s.insert("backbone.w", Group::Backbone, Tensor::row(vec![1.0, -2.0])).unwrap();
        let b = s.insert("adaln.w", Group::AdaLn, Tensor::row(vec![1.0])).unwrap();
        (s, a, b)
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let (mut s, a, b) = store();
        let before = s.clone();
        let mut grads = ParamGrads::default();
        grads.insert(a, Tensor::zeros(1, 2));
        grads.insert(b, Tensor::zeros(1, 1));
        Adam::new().step(&mut s, &grads, &AdamConfig::with_lr(0.1), &all_groups()).unwrap();
        assert!(s.group_bits_equal(&before, Group::Backbone));
        assert!(s.group_bits_equal(&before, Group::AdaLn));
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2 after bias correction, so the step is lr * g/|g|.
        let (mut s, _, b) = store();
        let mut grads = ParamGrads::default();
        grads.insert(b, Tensor::scalar(1.0));
        Adam::new().step(&mut s, &grads, &AdamConfig::with_lr(0.1), &adaln_only()).unwrap();
        assert!((s.value(b).item() - 0.9).abs() < 1e-7);
    }

    #[test]
    fn mask_freezes_other_groups() {
        let (mut s, a, b) = store();
        let before = s.clone();
        let mut grads = ParamGrads::default();
        grads.insert(a, Tensor::row(vec![3.0, 4.0]));
        grads.insert(b, Tensor::scalar(1.0));
        let mut opt = Adam::new();
        for _ in 0..5 {
            opt.step(&mut s, &grads, &AdamConfig::with_lr(0.1), &adaln_only()).unwrap();
        }
        assert!(s.group_bits_equal(&before, Group::Backbone));
        assert!(!s.group_bits_equal(&before, Group::AdaLn));
        assert!(opt.moments[a.index()].is_none());
    }

    #[test]
    fn rejects_non_positive_lr() {
        let (mut s, _, _) = store();
        let err = Adam::new().step(&mut s, &ParamGrads::default(), &AdamConfig::with_lr(0.0), &all_groups());
        assert!(err.is_err());
    }
}
