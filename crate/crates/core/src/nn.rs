//! Parameter storage, initialisation, and the Adam optimiser.
//!
//! Parameters are named tensors addressed by slash-separated paths like
//! `enc/l0/b0/conv1/w`. The name order (lexicographic) is canonical: it fixes
//! gradient layout, optimiser state, checkpoint tensor tables, and checksums.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::IxDyn;
use rand::Rng;

use crate::autodiff::{Arr, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::util;

/// Ordered collection of named parameter tensors.
#[derive(Clone, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Arc<Arr>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Arr) {
        self.entries.insert(name.to_string(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> &Arr {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Arr> {
        self.entries.get(name).map(|a| a.as_ref())
    }

    pub fn set(&mut self, name: &str, value: Arr) {
        let slot = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        *slot = Arc::new(value);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }

    /// Merge another set under a name prefix.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (name, value) in &other.entries {
            self.entries.insert(format!("{prefix}/{name}"), Arc::clone(value));
        }
    }

    /// Sub-set of parameters whose names start with any of the prefixes.
    pub fn filter_prefixes(&self, prefixes: &[&str]) -> ParamSet {
        let entries = self
            .entries
            .iter()
            .filter(|(name, _)| prefixes.iter().any(|p| name.starts_with(p)))
            .map(|(k, v)| (k.clone(), Arc::clone(v)))
            .collect();
        ParamSet { entries }
    }

    /// Register every tensor as a shared leaf on a tape.
    pub fn bind(&self, tape: &mut Tape) -> ParamBinding {
        let vars = self
            .entries
            .iter()
            .map(|(name, value)| (name.clone(), tape.leaf_shared(Arc::clone(value))))
            .collect();
        ParamBinding { vars }
    }

    /// Gradient vector in canonical name order (zeros where a tensor was unused).
    pub fn grads_in_order(&self, binding: &ParamBinding, grads: &Gradients) -> Vec<Arr> {
        self.entries
            .iter()
            .map(|(name, value)| grads.get_or_zeros(binding.var(name), value.shape()))
            .collect()
    }

    /// Checksum over the f32 little-endian encoding of all tensors in name
    /// order; identical to hashing the checkpoint payload.
    pub fn checksum(&self) -> String {
        let mut bytes = Vec::new();
        for (name, value) in &self.entries {
            bytes.extend_from_slice(name.as_bytes());
            for v in value.iter() {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        util::content_hash(&bytes)
    }

    /// Round every value through f32, mirroring a checkpoint save/load cycle.
    pub fn round_trip_f32(&self) -> ParamSet {
        let entries = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), Arc::new(v.mapv(|x| x as f32 as f64))))
            .collect();
        ParamSet { entries }
    }

    /// Abort if any value is non-finite; returns the offending tensor name.
    pub fn check_finite(&self) -> Result<()> {
        for (name, value) in &self.entries {
            if !value.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite values in parameter {name}")));
            }
        }
        Ok(())
    }
}

/// Tape handles for one forward pass over a `ParamSet`.
pub struct ParamBinding {
    vars: BTreeMap<String, Var>,
}

impl ParamBinding {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn merged(mut self, other: ParamBinding) -> ParamBinding {
        self.vars.extend(other.vars);
        self
    }
}

// ---- initialisers ----

/// Normal(0, 1/sqrt(fan_in)) tensor, the default for conv and linear weights.
pub fn init_fan_in<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Arr {
    let std = 1.0 / (fan_in as f64).sqrt();
    let mut a = Arr::zeros(IxDyn(shape));
    for v in a.iter_mut() {
        *v = std * util::standard_normal(rng);
    }
    a
}

pub fn init_normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Arr {
    let mut a = Arr::zeros(IxDyn(shape));
    for v in a.iter_mut() {
        *v = std * util::standard_normal(rng);
    }
    a
}

pub fn zeros(shape: &[usize]) -> Arr {
    Arr::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> Arr {
    Arr::from_elem(IxDyn(shape), 1.0)
}

/// Inverted-dropout mask: entries are 0 with probability `p`, else 1/(1-p).
pub fn dropout_mask<R: Rng>(shape: &[usize], p: f64, rng: &mut R) -> Arr {
    assert!((0.0..1.0).contains(&p));
    let keep = 1.0 - p;
    let mut a = Arr::zeros(IxDyn(shape));
    for v in a.iter_mut() {
        *v = if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
    }
    a
}

/// Half-cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step as f64 / total as f64).clamp(0.0, 1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Adam with optional decoupled weight decay.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Arr>,
    v: Vec<Arr>,
    t: usize,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let m = params.iter().map(|(_, a)| Arr::zeros(a.raw_dim())).collect();
        let v = params.iter().map(|(_, a)| Arr::zeros(a.raw_dim())).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, m, v, t: 0 }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    /// One update with gradients in canonical order.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Arr], lr: f64) {
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let names: Vec<String> = params.names().map(|s| s.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            let g = &grads[i];
            self.m[i].zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            self.v[i].zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let mut value = params.get(name).clone();
            {
                let m = &self.m[i];
                let v = &self.v[i];
                let wd = self.weight_decay;
                ndarray::Zip::from(&mut value).and(m).and(v).for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= lr * (mhat / (vhat.sqrt() + self.eps) + wd * *p);
                });
            }
            params.set(name, value);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::stream;

    #[test]
    fn adam_minimises_a_quadratic() {
        // Single tensor, loss = sum((x - 3)^2).
        let mut params = ParamSet::new();
        params.insert("x", zeros(&[4]));
        let mut opt = Adam::new(&params);
        for _ in 0..400 {
            let x = params.get("x").clone();
            let grad = x.mapv(|v| 2.0 * (v - 3.0));
            opt.step(&mut params, &[grad], 0.05);
        }
        for v in params.get("x").iter() {
            assert!((v - 3.0).abs() < 1e-3, "converged to {v}");
        }
    }

    #[test]
    fn checksum_tracks_content_not_identity() {
        let mut rng = stream(1, "nn");
        let mut a = ParamSet::new();
        a.insert("w", init_fan_in(&[3, 3], 3, &mut rng));
        let b = a.clone();
        assert_eq!(a.checksum(), b.checksum());
        let mut c = b.clone();
        c.set("w", zeros(&[3, 3]));
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn round_trip_is_idempotent() {
        let mut rng = stream(2, "nn");
        let mut a = ParamSet::new();
        a.insert("w", init_normal(&[8], 0.37, &mut rng));
        let once = a.round_trip_f32();
        let twice = once.round_trip_f32();
        assert_eq!(once.checksum(), twice.checksum());
    }

    #[test]
    fn dropout_mask_scales_kept_entries() {
        let mut rng = stream(3, "nn");
        let m = dropout_mask(&[1000], 0.2, &mut rng);
        let kept = m.iter().filter(|v| **v > 0.0).count();
        assert!((kept as f64 - 800.0).abs() < 60.0);
        for v in m.iter() {
            assert!(*v == 0.0 || (*v - 1.25).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert!((cosine_lr(1.0, 0, 10) - 1.0).abs() < 1e-12);
        assert!(cosine_lr(1.0, 10, 10) < 1e-12);
        assert!((cosine_lr(2.0, 5, 10) - 1.0).abs() < 1e-12);
    }
}
