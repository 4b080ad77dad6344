//! Synthetic texture images with an ordinal class label.
//!
//! Class `c` is an oriented sinusoidal grating with `base_cycles + c *
//! cycle_step` cycles across the image. Orientation, phase, amplitude,
//! colour, a smooth illumination gradient and pixel noise are random, so the
//! label is carried only by the grating's spatial frequency.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub size: usize,
    pub num_classes: usize,
    pub base_cycles: f64,
    pub cycle_step: f64,
    pub amplitude: [f64; 2],
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            num_classes: 4,
            base_cycles: 3.0,
            cycle_step: 2.0,
            amplitude: [0.1, 0.25],
            noise_std: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.num_classes == 0 {
            return Err(Error::Config("synth size and num_classes must be positive".into()));
        }
        if !(self.noise_std >= 0.0) || self.amplitude[0] > self.amplitude[1] || self.amplitude[0] < 0.0 {
            return Err(Error::Config(format!("invalid synth settings {self:?}")));
        }
        Ok(())
    }
}

/// One `[3, size, size]` texture of class `class`.
pub fn synth_texture(cfg: &SynthConfig, class: usize, seed: u64) -> Result<Tensor> {
    cfg.validate()?;
    if class >= cfg.num_classes {
        return Err(Error::Argument(format!(
            "class {class} out of range for {} classes",
            cfg.num_classes
        )));
    }
    let mut rng = rng_from_seed(seed);
    let n = cfg.size;
    let cycles = cfg.base_cycles + class as f64 * cfg.cycle_step;
    let theta = rng.random::<f64>() * std::f64::consts::PI;
    let phase = rng.random::<f64>() * std::f64::consts::TAU;
    let amp = cfg.amplitude[0] + (cfg.amplitude[1] - cfg.amplitude[0]) * rng.random::<f64>();
    let base: [f64; 3] = std::array::from_fn(|_| 0.3 + 0.4 * rng.random::<f64>());
    let tint: [f64; 3] = std::array::from_fn(|_| 0.5 + 0.5 * rng.random::<f64>());
    let (gx, gy) = (rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let k = std::f64::consts::TAU * cycles / n as f64;
    let (ct, st) = (theta.cos(), theta.sin());
    let mut data = vec![0.0; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let (u, v) = (x as f64, y as f64);
            let wave = (k * (u * ct + v * st) + phase).sin();
            let light = 0.2 * (gx * (u / n as f64 - 0.5) + gy * (v / n as f64 - 0.5));
            for c in 0..3 {
                let e = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                let val = base[c] + light + amp * tint[c] * wave + e;
                data[(c * n + y) * n + x] = val.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![3, n, n], data)
}

/// `count` textures with balanced labels (`i % num_classes`), each drawn
/// from a seed derived from `(seed, i)`.
pub fn synth_dataset(cfg: &SynthConfig, count: usize, seed: u64) -> Result<(Vec<Tensor>, Vec<usize>)> {
    let labels: Vec<usize> = (0..count).map(|i| i % cfg.num_classes.max(1)).collect();
    let images = labels
        .iter()
        .enumerate()
        .map(|(i, &c)| synth_texture(cfg, c, derive_seed(seed, &[i as u64])))
        .collect::<Result<_>>()?;
    Ok((images, labels))
}
