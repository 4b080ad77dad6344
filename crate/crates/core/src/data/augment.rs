//! Random crop, flips, contrast, brightness and unsharp-mask sharpening,
//! applied in that order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{dims3, resize_bilinear};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;

/// Ranges are inclusive `[lo, hi]` and sampled uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    /// Crop side length as a fraction of the image side.
    pub crop_scale: [f64; 2],
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub contrast: [f64; 2],
    pub brightness: [f64; 2],
    /// Unsharp-mask amount.
    pub sharpen: [f64; 2],
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            crop_scale: [0.8, 1.0],
            hflip_p: 0.5,
            vflip_p: 0.5,
            contrast: [0.8, 1.25],
            brightness: [0.8, 1.25],
            sharpen: [0.0, 0.5],
        }
    }
}

impl AugmentPolicy {
    /// A policy that leaves every image unchanged.
    pub fn identity() -> Self {
        Self {
            crop_scale: [1.0, 1.0],
            hflip_p: 0.0,
            vflip_p: 0.0,
            contrast: [1.0, 1.0],
            brightness: [1.0, 1.0],
            sharpen: [0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, [lo, hi]: [f64; 2], min_exclusive: bool| {
            let ok_lo = if min_exclusive { lo > 0.0 } else { lo >= 0.0 };
            if !(ok_lo && lo <= hi && hi.is_finite()) {
                return Err(Error::Argument(format!("augment {name}: invalid range [{lo}, {hi}]")));
            }
            Ok(())
        };
        range("crop_scale", self.crop_scale, true)?;
        if self.crop_scale[1] > 1.0 {
            return Err(Error::Argument(format!(
                "augment crop_scale {} exceeds the image size",
                self.crop_scale[1]
            )));
        }
        range("contrast", self.contrast, true)?;
        range("brightness", self.brightness, true)?;
        range("sharpen", self.sharpen, false)?;
        for (name, p) in [("hflip_p", self.hflip_p), ("vflip_p", self.vflip_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Argument(format!("augment {name} {p} not in [0, 1]")));
            }
        }
        Ok(())
    }
}

fn draw<R: Rng>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    let u: f64 = rng.random();
    if lo == hi {
        lo
    } else {
        lo + (hi - lo) * u
    }
}

fn clamp01(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Crop of `(ch, cw)` at `(top, left)`.
pub fn crop(t: &Tensor, top: usize, left: usize, ch: usize, cw: usize) -> Result<Tensor> {
    let (c, h, w) = dims3(t)?;
    if ch == 0 || cw == 0 || top + ch > h || left + cw > w {
        return Err(Error::Argument(format!(
            "crop {ch}x{cw} at ({top}, {left}) does not fit a {h}x{w} image"
        )));
    }
    let d = t.data();
    let mut out = Vec::with_capacity(c * ch * cw);
    for p in 0..c {
        for y in top..top + ch {
            let row = (p * h + y) * w;
            out.extend_from_slice(&d[row + left..row + left + cw]);
        }
    }
    Tensor::new(vec![c, ch, cw], out)
}

pub fn hflip(t: &Tensor) -> Result<Tensor> {
    let (_, _, w) = dims3(t)?;
    let mut out = t.clone();
    out.data_mut().chunks_mut(w).for_each(|row| row.reverse());
    Ok(out)
}

pub fn vflip(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = dims3(t)?;
    let d = t.data();
    let mut out = Vec::with_capacity(d.len());
    for p in 0..c {
        for y in (0..h).rev() {
            out.extend_from_slice(&d[(p * h + y) * w..(p * h + y + 1) * w]);
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Blends with the mean luminance: `m + f (x - m)`, clamped.
pub fn adjust_contrast(t: &Tensor, factor: f64) -> Result<Tensor> {
    let mean = super::luminance(t)?.sum() / (t.len() / 3) as f64;
    let mut out = t.map(|v| mean + factor * (v - mean));
    clamp01(&mut out);
    Ok(out)
}

/// Scales intensities: `f x`, clamped.
pub fn adjust_brightness(t: &Tensor, factor: f64) -> Tensor {
    let mut out = t.map(|v| v * factor);
    clamp01(&mut out);
    out
}

/// Unsharp mask `x + a (x - box3(x))` with edge replication, clamped.
pub fn sharpen(t: &Tensor, amount: f64) -> Result<Tensor> {
    let (c, h, w) = dims3(t)?;
    let d = t.data();
    let mut out = t.clone();
    let o = out.data_mut();
    for p in 0..c {
        let plane = &d[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in [-1isize, 0, 1] {
                    for dx in [-1isize, 0, 1] {
                        let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        acc += plane[yy * w + xx];
                    }
                }
                let v = plane[y * w + x];
                o[p * h * w + y * w + x] = (v + amount * (v - acc / 9.0)).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Applies the policy to a `[C, H, W]` image. All random draws happen up
/// front in a fixed order, so a given seed always yields the same choices;
/// transforms whose drawn parameter is the identity are skipped. The output
/// has the input's shape and lies in `[0, 1]`.
pub fn augment(image: &Tensor, policy: &AugmentPolicy, seed: u64) -> Result<Tensor> {
    policy.validate()?;
    let (_, h, w) = dims3(image)?;
    let mut rng = rng_from_seed(seed);
    let scale = draw(&mut rng, policy.crop_scale);
    let (fy, fx): (f64, f64) = (rng.random(), rng.random());
    let flip_h = rng.random::<f64>() < policy.hflip_p;
    let flip_v = rng.random::<f64>() < policy.vflip_p;
    let contrast = draw(&mut rng, policy.contrast);
    let brightness = draw(&mut rng, policy.brightness);
    let amount = draw(&mut rng, policy.sharpen);

    let ch = ((scale * h as f64).round() as usize).clamp(1, h);
    let cw = ((scale * w as f64).round() as usize).clamp(1, w);
    let mut x = if (ch, cw) == (h, w) {
        image.clone()
    } else {
        let top = ((h - ch) as f64 * fy).floor() as usize;
        let left = ((w - cw) as f64 * fx).floor() as usize;
        resize_bilinear(&crop(image, top, left, ch, cw)?, h, w)?
    };
    if flip_h {
        x = hflip(&x)?;
    }
    if flip_v {
        x = vflip(&x)?;
    }
    if contrast != 1.0 {
        x = adjust_contrast(&x, contrast)?;
    }
    if brightness != 1.0 {
        x = adjust_brightness(&x, brightness);
    }
    if amount != 0.0 {
        x = sharpen(&x, amount)?;
    }
    clamp01(&mut x);
    Ok(x)
}
