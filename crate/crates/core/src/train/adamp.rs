//! AdamP: Adam with decoupled weight decay whose update is projected onto the
//! tangent space of scale-invariant weights.
//!
//! For a multi-dimensional weight, the absolute cosine between its gradient
//! and the weight is measured per output channel and then over the whole
//! tensor. If the largest value falls below `delta / sqrt(d)` (`d` the length
//! of the compared vectors) the weight is treated as scale invariant: the
//! radial component of the update is removed and weight decay is scaled by
//! `wd_ratio`. Vectors (biases, norm scales) take the plain Adam step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamPConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub delta: f64,
    pub wd_ratio: f64,
    pub nesterov: bool,
    /// When false the optimizer is Adam with decoupled weight decay.
    pub projection: bool,
}

impl Default for AdamPConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            delta: 0.1,
            wd_ratio: 0.1,
            nesterov: false,
            projection: true,
        }
    }
}

impl AdamPConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps >= 0.0
            && self.weight_decay >= 0.0
            && self.delta >= 0.0
            && self.wd_ratio >= 0.0;
        if ok && self.lr.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamP {
    config: AdamPConfig,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl AdamP {
    pub fn new(config: AdamPConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn config(&self) -> &AdamPConfig {
        &self.config
    }

    /// Number of steps taken.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// First and second moments of parameter `index`, if it has been updated.
    pub fn moments(&self, index: usize) -> Option<(&Tensor, &Tensor)> {
        match (self.m.get(index), self.v.get(index)) {
            (Some(Some(m)), Some(Some(v))) => Some((m, v)),
            _ => None,
        }
    }

    /// Restores saved state (used when resuming from a checkpoint).
    pub fn restore(&mut self, step: u64, moments: Vec<Option<(Tensor, Tensor)>>) {
        self.step = step;
        let (m, v) = moments
            .into_iter()
            .map(|mv| match mv {
                Some((m, v)) => (Some(m), Some(v)),
                None => (None, None),
            })
            .unzip();
        self.m = m;
        self.v = v;
    }

    /// One update with the configured learning rate.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        self.step_with_lr(store, grads, self.config.lr)
    }

    /// One update of every trainable parameter that has a gradient. Refuses
    /// the whole step, leaving all state untouched, if any gradient is not
    /// finite.
    pub fn step_with_lr(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Argument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (id, g) in store.ids().zip(grads) {
            if let Some(g) = g {
                if store.kind(id) != ParamKind::Weight {
                    return Err(Error::Argument(format!("gradient given for buffer {}", store.name(id))));
                }
                g.expect_same_shape(store.get(id))?;
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!(
                        "gradient of {} is not finite; step refused",
                        store.name(id)
                    )));
                }
            }
        }
        self.m.resize(store.len(), None);
        self.v.resize(store.len(), None);
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let step_size = lr / bc1;
        for (id, g) in store.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            let Some(g) = g else { continue };
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let gd = g.data();
            for ((mi, vi), &gi) in m.data_mut().iter_mut().zip(v.data_mut()).zip(gd) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
            }
            let sbc2 = bc2.sqrt();
            let mut perturb: Vec<f64> = m
                .data()
                .iter()
                .zip(v.data())
                .zip(gd)
                .map(|((&mi, &vi), &gi)| {
                    let denom = vi.sqrt() / sbc2 + c.eps;
                    if c.nesterov {
                        (c.beta1 * mi + (1.0 - c.beta1) * gi) / denom
                    } else {
                        mi / denom
                    }
                })
                .collect();
            let p = store.get_mut(id);
            let mut wd_ratio = 1.0;
            if c.projection && p.ndim() > 1 {
                if let Some(ratio) = project(p, gd, &mut perturb, c.delta, c.wd_ratio, c.eps) {
                    wd_ratio = ratio;
                }
            }
            if c.weight_decay > 0.0 {
                let keep = 1.0 - lr * c.weight_decay * wd_ratio;
                p.data_mut().iter_mut().for_each(|w| *w *= keep);
            }
            for (w, u) in p.data_mut().iter_mut().zip(&perturb) {
                *w -= step_size * u;
            }
        }
        Ok(())
    }
}

/// Row views tried in order: one row per output channel, then the whole
/// tensor as a single row.
fn views(p: &Tensor) -> [usize; 2] {
    [p.shape()[0], 1]
}

fn cosine_rows(a: &[f64], b: &[f64], rows: usize, eps: f64) -> f64 {
    let d = a.len() / rows;
    (0..rows)
        .map(|r| {
            let (x, y) = (&a[r * d..(r + 1) * d], &b[r * d..(r + 1) * d]);
            let dot: f64 = x.iter().zip(y).map(|(u, v)| u * v).sum();
            let nx = x.iter().map(|u| u * u).sum::<f64>().sqrt().max(eps);
            let ny = y.iter().map(|u| u * u).sum::<f64>().sqrt().max(eps);
            (dot / (nx * ny)).abs()
        })
        .fold(0.0, f64::max)
}

/// Removes the component of `perturb` along `weight`, row by row.
pub fn project_tangent(weight: &[f64], perturb: &mut [f64], rows: usize, eps: f64) {
    let d = weight.len() / rows;
    for r in 0..rows {
        let w = &weight[r * d..(r + 1) * d];
        let u = &mut perturb[r * d..(r + 1) * d];
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt() + eps;
        let dot: f64 = w.iter().zip(u.iter()).map(|(x, y)| (x / norm) * y).sum();
        for (ui, wi) in u.iter_mut().zip(w) {
            *ui -= (wi / norm) * dot;
        }
    }
}

/// Applies the projection if the weight looks scale invariant under one of
/// the views; returns the weight-decay ratio to use in that case.
fn project(p: &Tensor, grad: &[f64], perturb: &mut [f64], delta: f64, wd_ratio: f64, eps: f64) -> Option<f64> {
    for rows in views(p) {
        let d = p.len() / rows;
        if cosine_rows(grad, p.data(), rows, eps) < delta / (d as f64).sqrt() {
            project_tangent(p.data(), perturb, rows, eps);
            return Some(wd_ratio);
        }
    }
    None
}
