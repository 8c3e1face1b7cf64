use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::rng::SplitMix64;

/// Handle to a parameter registered in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameters with gradient accumulators and Adam moments.
///
/// Gradients start out absent; [`ParamStore::zero_grads`] or any backward
/// pass populates them, and [`ParamStore::adam_step`] consumes them.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    index: BTreeMap<String, usize>,
    values: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    frozen: Vec<bool>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "parameter `{name}` registered twice"
            )));
        }
        let id = self.values.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.first_moment.push(Tensor::zeros(value.shape()));
        self.second_moment.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.grads.push(None);
        self.frozen.push(false);
        Ok(ParamId(id))
    }

    /// Registers a tensor drawn uniformly from `[-bound, bound]`.
    pub fn register_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        bound: f64,
        rng: &mut SplitMix64,
    ) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
        self.register(name, Tensor::from_vec(shape, data)?)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Ids whose names start with any of `prefixes`, in registration order.
    pub fn ids_with_prefix(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| prefixes.iter().any(|p| self.names[id.0].starts_with(p)))
            .collect()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient accumulator, created as zeros on first touch.
    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        let shape = self.values[id.0].shape().to_vec();
        self.grads[id.0].get_or_insert_with(|| Tensor::zeros(&shape))
    }

    pub fn accumulate(&mut self, id: ParamId, delta: &[f64]) {
        let g = self.grad_mut(id);
        for (a, b) in g.data_mut().iter_mut().zip(delta) {
            *a += b;
        }
    }

    pub fn zero_grads(&mut self) {
        for (g, v) in self.grads.iter_mut().zip(&self.values) {
            match g {
                Some(t) => t.fill(0.0),
                None => *g = Some(Tensor::zeros(v.shape())),
            }
        }
    }

    pub fn clear_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn set_frozen(&mut self, prefixes: &[&str], frozen: bool) {
        for id in self.ids_with_prefix(prefixes) {
            self.frozen[id.0] = frozen;
        }
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Global L2 norm over populated gradients of trainable parameters.
    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .zip(&self.frozen)
            .filter(|(_, &f)| !f)
            .filter_map(|(g, _)| g.as_ref())
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for (g, &f) in self.grads.iter_mut().zip(&self.frozen) {
                if let (Some(g), false) = (g.as_mut(), f) {
                    g.scale(s);
                }
            }
        }
        norm
    }

    pub fn scale_grads(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale(s);
        }
    }

    pub fn adam_step(&mut self, learning_rate: f64) -> Result<()> {
        self.adam_step_with(AdamConfig::with_lr(learning_rate))
    }

    /// Bias-corrected Adam update over trainable parameters; clears gradients.
    pub fn adam_step_with(&mut self, cfg: AdamConfig) -> Result<()> {
        for i in 0..self.values.len() {
            if !self.frozen[i] && self.grads[i].is_none() {
                return Err(Error::MissingGradient(self.names[i].clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..self.values.len() {
            if self.frozen[i] {
                continue;
            }
            let g = self.grads[i].as_ref().expect("checked above");
            g.ensure_finite(&self.names[i])?;
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let p = self.values[i].data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        self.clear_grads();
        Ok(())
    }

    pub(crate) fn replace_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::shape(
                "ParamStore::replace_value",
                format!(
                    "`{}` expects {:?}, got {:?}",
                    self.names[id.0],
                    self.values[id.0].shape(),
                    value.shape()
                ),
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.register("p", Tensor::vector(vec![v])).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut s, id) = scalar_store(1.5);
        s.zero_grads();
        s.adam_step(0.1).unwrap();
        assert_eq!(s.value(id).data(), &[1.5]);
        assert_eq!(s.step_count(), 1);
        assert!(s.grad(id).is_none());
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [0.003, -2.0, 17.0] {
            let (mut s, id) = scalar_store(0.0);
            s.accumulate(id, &[g]);
            s.adam_step(0.01).unwrap();
            let moved = s.value(id).data()[0];
            assert!((moved.abs() - 0.01).abs() < 1e-6, "g={g} moved={moved}");
            assert_eq!(moved.signum(), -g.signum());
        }
    }

    #[test]
    fn missing_gradient_rejected() {
        let (mut s, _) = scalar_store(0.0);
        assert!(matches!(s.adam_step(0.1), Err(Error::MissingGradient(_))));
    }

    #[test]
    fn frozen_params_are_skipped() {
        let (mut s, id) = scalar_store(2.0);
        s.set_frozen(&["p"], true);
        s.adam_step(0.1).unwrap();
        assert_eq!(s.value(id).data(), &[2.0]);
    }

    #[test]
    fn identical_stores_update_identically() {
        let mut rng = SplitMix64::new(3);
        let mut a = ParamStore::new();
        a.register_uniform("w", &[4, 4], 0.5, &mut rng).unwrap();
        let mut b = a.clone();
        for s in [&mut a, &mut b] {
            let id = s.id("w").unwrap();
            let g: Vec<f64> = (0..16).map(|i| (i as f64 - 7.0) * 0.1).collect();
            s.accumulate(id, &g);
            s.adam_step(0.01).unwrap();
        }
        let id = a.id("w").unwrap();
        assert_eq!(a.value(id), b.value(id));
    }

    #[test]
    fn duplicate_names_rejected() {
        let (mut s, _) = scalar_store(0.0);
        assert!(s.register("p", Tensor::vector(vec![0.0])).is_err());
    }
}
