//! Named parameter storage and the Adam optimizer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub trainable: bool,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// Parameters keyed by unique name, with per-parameter Adam moments and a
/// shared step counter. Iteration is always in name order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
    step: u64,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::invalid("param_store", format!("duplicate parameter `{name}`")));
        }
        let shape = value.shape().to_vec();
        self.params.insert(
            name,
            Param {
                value,
                trainable: true,
                m: Tensor::zeros(shape.clone()),
                v: Tensor::zeros(shape),
            },
        );
        Ok(())
    }

    /// Insert, or replace the value of an existing parameter (shape must
    /// match). Optimizer moments are kept.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        match self.params.get_mut(name) {
            Some(p) => {
                if p.value.shape() != value.shape() {
                    return Err(Error::shape("param_store.set", p.value.shape(), value.shape()));
                }
                p.value = value;
                Ok(())
            }
            None => self.insert(name, value),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.trainable)
    }

    /// Set the trainable flag on every parameter whose name starts with
    /// `prefix`. Returns how many parameters matched.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    pub fn freeze_all(&mut self) {
        self.set_trainable("", false);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Copy every parameter under `prefix` from `other` (values only).
    pub fn copy_prefix_from(&mut self, other: &ParamStore<T>, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (name, p) in other.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.set(name, p.value.clone())?;
            n += 1;
        }
        Ok(n)
    }

    /// One Adam update with bias correction over every trainable parameter.
    ///
    /// Every trainable parameter must have a gradient, and every gradient
    /// must name a known parameter.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Tensor<T>>, cfg: &AdamConfig) -> Result<()> {
        if let Some(unknown) = grads.keys().find(|k| !self.params.contains_key(*k)) {
            return Err(Error::UnknownParam(unknown.clone()));
        }
        for (name, p) in &self.params {
            if p.trainable {
                let g = grads.get(name).ok_or_else(|| Error::MissingGradient(name.clone()))?;
                if g.shape() != p.value.shape() {
                    return Err(Error::shape("adam_step", p.value.shape(), g.shape()));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let bc1 = T::one() - T::of(cfg.beta1.powi(t));
        let bc2 = T::one() - T::of(cfg.beta2.powi(t));
        let lr = T::of(cfg.lr);
        let eps = T::of(cfg.eps);
        for (name, p) in self.params.iter_mut().filter(|(_, p)| p.trainable) {
            let g = &grads[name];
            let Param { value, m, v, .. } = p;
            for (((w, mi), vi), &gi) in value
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new([v.len()], v.to_vec()).unwrap()).unwrap();
        s
    }

    fn grads(v: &[f64]) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("w".to_string(), Tensor::new([v.len()], v.to_vec()).unwrap())])
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut s = store(&[1.0, -2.0, 3.0]);
        s.adam_step(&grads(&[0.0, 0.0, 0.0]), &AdamConfig::default()).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[1.0, -2.0, 3.0]);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn first_step_is_sign_scaled() {
        // m̂ = g, v̂ = g² at t = 1, so Δ = −lr·g/(|g|+ε).
        let cfg = AdamConfig::with_lr(0.01);
        let g = [0.5, -3.0, 1e-3];
        let mut s = store(&[0.0, 0.0, 0.0]);
        s.adam_step(&grads(&g), &cfg).unwrap();
        for (w, gi) in s.get("w").unwrap().data().iter().zip(g) {
            let want = -cfg.lr * gi / (gi.abs() + cfg.eps);
            assert!((w - want).abs() < 1e-15, "{w} vs {want}");
        }
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        let mut s = store(&[0.0, 0.0]);
        let cfg = AdamConfig::default();
        let mut prev = [0.0, 0.0];
        for _ in 0..50 {
            s.adam_step(&grads(&[2.0, -0.1]), &cfg).unwrap();
            let cur = s.get("w").unwrap().data();
            assert!(cur[0] < prev[0] && cur[1] > prev[1]);
            prev = [cur[0], cur[1]];
        }
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = store(&[1.0]);
        s.insert("b", Tensor::zeros([1])).unwrap();
        let err = s.adam_step(&grads(&[1.0]), &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(n) if n == "b"));
        // frozen parameters need no gradient
        s.set_trainable("b", false);
        s.adam_step(&grads(&[1.0]), &AdamConfig::default()).unwrap();
    }

    #[test]
    fn unknown_gradient_is_an_error() {
        let mut s = store(&[1.0]);
        let mut g = grads(&[1.0]);
        g.insert("ghost".into(), Tensor::zeros([1]));
        assert!(matches!(
            s.adam_step(&g, &AdamConfig::default()),
            Err(Error::UnknownParam(_))
        ));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store(&[1.0]);
        assert!(s.insert("w", Tensor::zeros([1])).is_err());
    }
}
