use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::Tensor;
use crate::error::{Error, Result};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
    trainable: bool,
}

/// Named parameter tensors with gradient slots and Adam moments.
///
/// Iteration is lexicographic by name. Every change to a value bumps
/// `version`, which lets tapes detect that they were recorded against an
/// older state. A clone is a distinct store with its own id.
#[derive(Debug)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
    id: u64,
    version: u64,
    step: u64,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            entries: self.entries.clone(),
            id: fresh_id(),
            version: self.version,
            step: self.step,
        }
    }
}

impl PartialEq for ParamStore {
    /// Equal names, values, trainable flags and optimizer state; ids ignored.
    fn eq(&self, other: &Self) -> bool {
        self.step == other.step && self.entries == other.entries
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
            id: fresh_id(),
            version: 0,
            step: 0,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Number of Adam steps taken.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count over all tensors whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, e)| e.value.len())
            .sum()
    }

    /// Insert or replace a trainable tensor; optimizer state is reset.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let shape = value.shape().to_vec();
        self.entries.insert(
            name.into(),
            Entry {
                grad: Tensor::zeros(&shape),
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
                value,
                trainable: true,
            },
        );
        self.version += 1;
    }

    /// Copy every entry of `other` into `self`, replacing same-named ones.
    pub fn merge(&mut self, other: &ParamStore) {
        for (k, e) in &other.entries {
            self.entries.insert(k.clone(), e.clone());
        }
        self.version += 1;
    }

    /// New store holding clones of the entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, e) in self.entries.iter().filter(|(k, _)| k.starts_with(prefix)) {
            out.entries.insert(k.clone(), e.clone());
        }
        out
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.grad)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::config(name, "unknown parameter"))?;
        if e.value.shape() != value.shape() {
            return Err(Error::shape("set_value", e.value.shape(), value.shape()));
        }
        e.value = value;
        self.version += 1;
        Ok(())
    }

    /// Overwrite one scalar of `name`.
    pub fn set_scalar(&mut self, name: &str, index: usize, value: f64) {
        if let Some(e) = self.entries.get_mut(name) {
            e.value.data_mut()[index] = value;
            self.version += 1;
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    /// Set the trainable flag on every entry whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (_, e) in self.entries.iter_mut().filter(|(k, _)| k.starts_with(prefix)) {
            e.trainable = trainable;
        }
        self.version += 1;
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub(crate) fn add_grad(&mut self, name: &str, g: &Tensor) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::config(name, "unknown parameter"))?;
        if e.grad.shape() != g.shape() {
            return Err(Error::shape("accumulate", e.grad.shape(), g.shape()));
        }
        e.grad
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Euclidean norm of all trainable gradients.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .flat_map(|e| e.grad.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Multiply all gradients by `c`.
    pub fn scale_grads(&mut self, c: f64) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }

    /// Forget Adam moments and the step count, so a new optimization does
    /// not inherit the state of whatever trained these values.
    pub fn reset_optimizer(&mut self) {
        for e in self.entries.values_mut() {
            e.m.data_mut().fill(0.0);
            e.v.data_mut().fill(0.0);
        }
        self.step = 0;
    }

    /// One bias-corrected Adam update of every trainable entry, then zero all
    /// gradients. A non-finite gradient refuses the step and leaves the
    /// store untouched.
    pub fn adam_step(&mut self, cfg: &AdamConfig, lr: f64) -> Result<()> {
        for e in self.entries.values() {
            if e.trainable && !e.grad.is_finite() {
                return Err(Error::Numerical {
                    op: "adam_step",
                    node: 0,
                });
            }
        }
        let t = (self.step + 1) as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for e in self.entries.values_mut().filter(|e| e.trainable) {
            let Entry { value, grad, m, v, .. } = e;
            for (((p, &g), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *p -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        self.step += 1;
        self.version += 1;
        self.zero_grad();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(g: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::vector(vec![1.0, -2.0]));
        p.add_grad("a", &Tensor::vector(vec![g, -g])).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_values() {
        let mut p = store(0.0);
        p.adam_step(&AdamConfig::default(), 0.1).unwrap();
        assert_eq!(p.value("a").unwrap().data(), &[1.0, -2.0]);
        assert_eq!(p.step(), 1);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        let g = 0.3;
        let lr = 0.01;
        let mut p = store(g);
        p.adam_step(&AdamConfig::default(), lr).unwrap();
        // m̂ = g, v̂ = g² after bias correction.
        let expect = lr * g / (g.abs() + 1e-8);
        let d = p.value("a").unwrap().data();
        assert!((d[0] - (1.0 - expect)).abs() < 1e-15);
        assert!((d[1] - (-2.0 + expect)).abs() < 1e-15);
        assert_eq!(p.grad("a").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn nonfinite_gradient_refused() {
        let mut p = store(f64::NAN);
        let before = p.clone();
        assert!(matches!(
            p.adam_step(&AdamConfig::default(), 0.1),
            Err(Error::Numerical { .. })
        ));
        assert_eq!(p.value("a"), before.value("a"));
        assert_eq!(p.step(), 0);
    }

    #[test]
    fn frozen_entries_do_not_move() {
        let mut p = store(1.0);
        p.set_trainable("a", false);
        p.adam_step(&AdamConfig::default(), 0.1).unwrap();
        assert_eq!(p.value("a").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn clones_get_fresh_ids() {
        let p = ParamStore::new();
        let q = p.clone();
        assert_ne!(p.id(), q.id());
        assert_eq!(p, q);
    }

    #[test]
    fn repeated_runs_bitwise_identical() {
        let run = || {
            let mut p = store(0.7);
            for _ in 0..5 {
                p.add_grad("a", &Tensor::vector(vec![0.1, 0.2])).unwrap();
                p.adam_step(&AdamConfig::default(), 0.05).unwrap();
            }
            p.value("a").unwrap().clone()
        };
        let (a, b) = (run(), run());
        assert_eq!(
            a.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }
}
