use std::collections::HashMap;

use crate::error::{invalid, shape_err, Result};
use crate::tensor::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        for b in [self.beta1, self.beta2] {
            if !(b > 0.0 && b < 1.0) {
                return Err(invalid(format!("Adam betas must lie in (0,1), got {b}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Bias-corrected Adam. Moment buffers are kept in `f64` and addressed by slot.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    slots: Vec<Moments>,
    names: HashMap<String, usize>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, slots: Vec::new(), names: HashMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Starts a new step; call once before the `update_*` calls of that step.
    pub fn tick(&mut self) {
        self.step += 1;
    }

    fn slot(&mut self, slot: usize, len: usize) -> &mut Moments {
        if self.slots.len() <= slot {
            self.slots.resize_with(slot + 1, Moments::default);
        }
        let s = &mut self.slots[slot];
        if s.m.len() != len {
            s.m = vec![0.0; len];
            s.v = vec![0.0; len];
        }
        s
    }

    fn deltas(&mut self, slot: usize, grads: impl ExactSizeIterator<Item = f64>) -> Vec<f64> {
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let t = self.step.max(1) as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let s = self.slot(slot, grads.len());
        grads
            .enumerate()
            .map(|(i, g)| {
                s.m[i] = beta1 * s.m[i] + (1.0 - beta1) * g;
                s.v[i] = beta2 * s.v[i] + (1.0 - beta2) * g * g;
                let m_hat = s.m[i] / c1;
                let v_hat = s.v[i] / c2;
                lr * m_hat / (v_hat.sqrt() + eps)
            })
            .collect()
    }

    pub fn update_f32(&mut self, slot: usize, params: &mut [f32], grads: &[f32]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(shape_err("parameter and gradient lengths differ"));
        }
        let d = self.deltas(slot, grads.iter().map(|&g| g as f64));
        for (p, d) in params.iter_mut().zip(d) {
            *p = (*p as f64 - d) as f32;
        }
        Ok(())
    }

    pub fn update_f64(&mut self, slot: usize, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(shape_err("parameter and gradient lengths differ"));
        }
        let d = self.deltas(slot, grads.iter().copied());
        for (p, d) in params.iter_mut().zip(d) {
            *p -= d;
        }
        Ok(())
    }

    /// One full step over every tensor named in `grads`.
    pub fn step_paramset(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        self.tick();
        for (name, g) in grads.iter() {
            let next = self.names.len();
            let slot = *self.names.entry(name.to_string()).or_insert(next);
            let p = params.get_mut(name).ok_or_else(|| shape_err(format!("no parameter {name}")))?;
            p.same_shape(g)?;
            self.update_f32(slot, p.data_mut(), g.data())?;
        }
        Ok(())
    }
}
