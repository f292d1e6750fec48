use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

/// A trainable tensor together with its AdamW moment accumulators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: DenseMatrix,
    first_moment: DenseMatrix,
    second_moment: DenseMatrix,
    /// Whether decoupled weight decay applies to this tensor.
    pub decay: bool,
}

impl Param {
    pub fn new(value: DenseMatrix, decay: bool) -> Self {
        let (r, c) = value.shape();
        Self {
            value,
            first_moment: DenseMatrix::zeros(r, c),
            second_moment: DenseMatrix::zeros(r, c),
            decay,
        }
    }

    pub fn moments(&self) -> (&DenseMatrix, &DenseMatrix) {
        (&self.first_moment, &self.second_moment)
    }
}

/// Named parameters of every network plus the optimizer step counter.
///
/// Iteration order is the lexicographic key order, which fixes the layout of
/// [`ParamStore::to_vector`] and therefore the finite-difference oracle.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseMatrix, decay: bool) {
        self.params.insert(name.into(), Param::new(value, decay));
    }

    /// Glorot-uniform weight matrix in ±sqrt(6 / (fan_in + fan_out)).
    pub fn insert_glorot<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value = DenseMatrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-limit..limit));
        self.insert(name, value, true);
    }

    pub fn get(&self, name: &str) -> Result<&DenseMatrix> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut DenseMatrix> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// All parameter values flattened in key order.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for p in self.params.values() {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    pub fn set_from_vector(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_scalars() {
            return Err(Error::shape(
                "ParamStore::set_from_vector",
                self.num_scalars(),
                values.len(),
            ));
        }
        let mut offset = 0;
        for p in self.params.values_mut() {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// Gradient accumulator keyed like a [`ParamStore`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, DenseMatrix>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    /// A zero gradient for every parameter in `store`.
    pub fn zeros_like(store: &ParamStore) -> Self {
        let grads = store
            .params
            .iter()
            .map(|(k, p)| (k.clone(), DenseMatrix::zeros(p.value.rows(), p.value.cols())))
            .collect();
        Self { grads }
    }

    pub fn accumulate(&mut self, name: &str, grad: &DenseMatrix) -> Result<()> {
        match self.grads.get_mut(name) {
            Some(existing) => existing.add_assign(grad),
            None => {
                self.grads.insert(name.to_string(), grad.clone());
                Ok(())
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&DenseMatrix> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseMatrix)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Flattened in the same key order as [`ParamStore::to_vector`]; missing
    /// entries contribute zeros.
    pub fn to_vector(&self, store: &ParamStore) -> Vec<f64> {
        let mut out = Vec::with_capacity(store.num_scalars());
        for (name, p) in &store.params {
            match self.grads.get(name) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat_n(0.0, p.value.len())),
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(DenseMatrix::is_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.2,
        }
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
///
/// `grads` must carry an entry for every parameter in `store`.
pub fn adamw_step(store: &mut ParamStore, grads: &Gradients, cfg: &AdamWConfig) -> Result<()> {
    for name in store.params.keys() {
        let g = grads
            .grads
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing gradient for parameter `{name}`")))?;
        let p = &store.params[name];
        g.ensure_shape("adamw_step", p.value.rows(), p.value.cols())?;
    }
    store.step += 1;
    let t = store.step as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in store.params.iter_mut() {
        let g = &grads.grads[name];
        let decay = if p.decay { cfg.lr * cfg.weight_decay } else { 0.0 };
        let values = p.value.data_mut();
        let m = p.first_moment.data_mut();
        let v = p.second_moment.data_mut();
        for i in 0..values.len() {
            let gi = g.data()[i];
            values[i] -= decay * values[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(value: f64) -> ParamStore {
        let mut store = ParamStore::new();
        store.insert("p", DenseMatrix::row_vector(&[value]), true);
        store
    }

    fn scalar_grad(g: f64) -> Gradients {
        let mut grads = Gradients::new();
        grads.accumulate("p", &DenseMatrix::row_vector(&[g])).unwrap();
        grads
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut store = scalar_store(0.7);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        adamw_step(&mut store, &scalar_grad(0.0), &cfg).unwrap();
        assert_eq!(store.get("p").unwrap().get(0, 0), 0.7);
        assert_eq!(store.step(), 1);
    }

    #[test]
    fn positive_gradient_descends() {
        let mut store = scalar_store(1.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        adamw_step(&mut store, &scalar_grad(1.0), &cfg).unwrap();
        assert!(store.get("p").unwrap().get(0, 0) < 1.0);
    }

    #[test]
    fn two_steps_match_hand_trace() {
        // Hand trace, lr=0.1, betas (0.9, 0.98), eps=1e-8, wd=0.2:
        // step 1, g=1:   p = 1 - 0.02 = 0.98; m = 0.1; v = 0.02
        //                m̂ = 1, v̂ = 1, p = 0.98 - 0.1/(1+1e-8)
        // step 2, g=0.5: p *= (1 - 0.02); m = 0.09 + 0.05 = 0.14
        //                v = 0.0196 + 0.005 = 0.0246
        //                m̂ = 0.14/0.19, v̂ = 0.0246/0.0396
        let cfg = AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.2,
        };
        let mut p = 0.98 - 0.1 / (1.0 + 1e-8);
        p -= 0.02 * p;
        let m_hat: f64 = 0.14 / 0.19;
        let v_hat: f64 = 0.0246 / (1.0 - 0.98f64 * 0.98);
        p -= 0.1 * m_hat / (v_hat.sqrt() + 1e-8);

        let mut store = scalar_store(1.0);
        adamw_step(&mut store, &scalar_grad(1.0), &cfg).unwrap();
        adamw_step(&mut store, &scalar_grad(0.5), &cfg).unwrap();
        assert!((store.get("p").unwrap().get(0, 0) - p).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut store = scalar_store(-2.5);
        let cfg = AdamWConfig {
            lr: 0.0,
            ..AdamWConfig::default()
        };
        for _ in 0..3 {
            adamw_step(&mut store, &scalar_grad(3.0), &cfg).unwrap();
        }
        assert_eq!(store.get("p").unwrap().get(0, 0), -2.5);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut store = scalar_store(1.0);
        let err = adamw_step(&mut store, &Gradients::new(), &AdamWConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert_eq!(store.step(), 0);
    }

    #[test]
    fn vector_roundtrip_preserves_order() {
        let mut store = ParamStore::new();
        store.insert("b", DenseMatrix::row_vector(&[3.0, 4.0]), false);
        store.insert("a", DenseMatrix::row_vector(&[1.0, 2.0]), true);
        assert_eq!(store.to_vector(), vec![1.0, 2.0, 3.0, 4.0]);
        store.set_from_vector(&[5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(store.get("b").unwrap().data(), &[7.0, 8.0]);
    }
}
