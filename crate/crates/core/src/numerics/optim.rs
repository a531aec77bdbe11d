use std::collections::{BTreeMap, HashMap};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named trainable tensors in a stable (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    tensors: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Binds every tensor as a named parameter leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Result<Bound> {
        let mut vars = HashMap::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            vars.insert(name.clone(), g.param(name, t.clone())?);
        }
        Ok(Bound { vars })
    }

    /// Binds every tensor as a constant (inference, no gradients).
    pub fn bind_frozen(&self, g: &mut Graph) -> Result<Bound> {
        let mut vars = HashMap::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            vars.insert(name.clone(), g.input(t.clone())?);
        }
        Ok(Bound { vars })
    }
}

/// Graph handles of bound parameters.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    /// Wraps existing graph handles, e.g. inputs of a gradient check.
    pub fn from_vars(vars: HashMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter {name} not bound")))
    }
}

/// Linear warmup to `peak` over `warmup` steps, then constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f32,
    pub warmup: usize,
}

impl LrSchedule {
    /// Learning rate for the 1-based optimizer step `step`.
    pub fn at(&self, step: usize) -> f32 {
        if self.warmup == 0 || step >= self.warmup {
            self.peak
        } else {
            self.peak * step as f32 / self.warmup as f32
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Decay is applied only to tensors with at least this rank.
    pub decay_min_rank: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decay_min_rank: 1,
        }
    }
}

/// First/second moments and step count of AdamW.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step: usize,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl OptimState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One AdamW update with bias correction and decoupled weight decay.
    /// Parameters without a gradient entry are left untouched.
    pub fn step(
        &mut self,
        params: &mut Params,
        grads: &HashMap<String, Tensor>,
        lr: f32,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.dims() != g.dims() {
                return Err(Error::shape(
                    "adamw",
                    format!("{name}: param {:?} grad {:?}", p.dims(), g.dims()),
                ));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        // sorted order keeps updates reproducible
        let mut names: Vec<&String> = grads.keys().collect();
        names.sort();
        for name in names {
            let g = &grads[name];
            let p = params.get_mut(name)?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let decay = if p.rank() >= c.decay_min_rank {
                1.0 - lr * c.weight_decay
            } else {
                1.0
            };
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi = *pi * decay - lr * mhat / (vhat.sqrt() + c.eps);
            }
            if !p.all_finite() {
                return Err(Error::NonFinite { op: "adamw" });
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm` (no-op
/// for `max_norm <= 0`). Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut HashMap<String, Tensor>, max_norm: f32) -> f32 {
    let mut names: Vec<String> = grads.keys().cloned().collect();
    names.sort();
    let sq: f64 = names
        .iter()
        .flat_map(|n| grads[n].data().iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum();
    let norm = sq.sqrt() as f32;
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.map(|v| v * s);
        }
    }
    norm
}
