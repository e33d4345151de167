//! Named parameters with gradient buffers and Adam moments.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
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

#[derive(Debug, Clone)]
pub(crate) struct ParamEntry {
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
}

/// Named, shaped parameter arrays with matching gradient buffers and
/// optimizer moments. BTreeMap keeps iteration order deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    pub(crate) entries: BTreeMap<String, ParamEntry>,
    pub(crate) adam_step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Names must be unique.
    pub fn add(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Usage(format!("duplicate parameter name `{name}`")));
        }
        let shape = value.shape().to_vec();
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                value,
                grad: Tensor::zeros(&shape),
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, name: &str) -> &Tensor {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .value
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .grad
    }

    pub(crate) fn grad_accumulate(&mut self, name: &str, delta: &[f32]) {
        let entry = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        debug_assert_eq!(entry.grad.len(), delta.len());
        for (g, d) in entry.grad.data_mut().iter_mut().zip(delta) {
            *g += *d;
        }
    }

    pub fn zero_grad(&mut self) {
        for entry in self.entries.values_mut() {
            entry.grad.data_mut().fill(0.0);
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for entry in self.entries.values() {
            for g in entry.grad.data() {
                acc += (*g as f64) * (*g as f64);
            }
        }
        acc.sqrt()
    }

    /// Scale all gradients so the global norm does not exceed `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = (max_norm / norm) as f32;
            for entry in self.entries.values_mut() {
                for g in entry.grad.data_mut() {
                    *g *= scale;
                }
            }
        }
        norm
    }

    /// One Adam update over every parameter; moments persist in the store.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.adam_step += 1;
        let t = self.adam_step as f64;
        let bc1 = 1.0 - (cfg.beta1 as f64).powf(t);
        let bc2 = 1.0 - (cfg.beta2 as f64).powf(t);
        for entry in self.entries.values_mut() {
            let g = entry.grad.data();
            let m = entry.m.data_mut();
            let v = entry.v.data_mut();
            let p = entry.value.data_mut();
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] as f64 / bc1;
                let v_hat = v[i] as f64 / bc2;
                p[i] -= (cfg.lr as f64 * m_hat / (v_hat.sqrt() + cfg.eps as f64)) as f32;
            }
            entry.value.debug_check_finite("adam_step");
        }
    }

    /// Byte-level fingerprint of all parameter values; used by the
    /// frozen-teacher checks.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, entry) in &self.entries {
            for b in name.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
            }
            for x in entry.value.data() {
                for b in x.to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    /// Copy the value of `src` into parameter `dst` (shapes must match).
    pub fn copy_value(&mut self, dst: &str, src: &Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(dst)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{dst}`")))?;
        if entry.value.shape() != src.shape() {
            return Err(Error::ShapeMismatch(format!(
                "copy into `{dst}`: {:?} vs {:?}",
                entry.value.shape(),
                src.shape()
            )));
        }
        entry.value.data_mut().copy_from_slice(src.data());
        Ok(())
    }
}
