//! Image quality scores on the luminance channel and the pass/fail rule.

use serde::{Deserialize, Serialize};

use super::luminance;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QcThresholds {
    /// Minimum variance of the Laplacian response.
    pub blur: f64,
    /// Minimum luminance standard deviation.
    pub contrast: f64,
    pub illumination_lo: f64,
    pub illumination_hi: f64,
    /// Maximum fraction of fully saturated pixels.
    pub artifact: f64,
}

impl Default for QcThresholds {
    fn default() -> Self {
        Self {
            blur: 1e-4,
            contrast: 0.05,
            illumination_lo: 0.1,
            illumination_hi: 0.9,
            artifact: 0.05,
        }
    }
}

impl QcThresholds {
    pub fn validate(&self) -> Result<()> {
        let all = [self.blur, self.contrast, self.illumination_lo, self.illumination_hi, self.artifact];
        if all.iter().any(|v| !v.is_finite()) || self.illumination_lo > self.illumination_hi {
            return Err(Error::Config(format!("invalid QC thresholds {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QcCheck {
    Blur,
    Contrast,
    Illumination,
    Artifact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub blur_score: f64,
    pub contrast_score: f64,
    pub illumination_score: f64,
    pub artifact_score: f64,
    pub pass: bool,
    pub failed_checks: Vec<QcCheck>,
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n)
}

/// Variance of the 4-neighbour Laplacian over interior pixels of an `[H, W]`
/// map; zero when the map has no interior.
pub fn laplacian_variance(lum: &Tensor) -> Result<f64> {
    let (h, w) = lum.dims2()?;
    let d = lum.data();
    let mut resp = Vec::with_capacity(h.saturating_sub(2) * w.saturating_sub(2));
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let i = y * w + x;
            resp.push(d[i - w] + d[i + w] + d[i - 1] + d[i + 1] - 4.0 * d[i]);
        }
    }
    Ok(mean_var(&resp).1)
}

/// Scores a `[3, H, W]` image; fails nothing on valid input.
pub fn quality_check(pixels: &Tensor, t: &QcThresholds) -> Result<QualityReport> {
    let lum = luminance(pixels)?;
    let (illumination, var) = mean_var(lum.data());
    let blur = laplacian_variance(&lum)?;
    let p = lum.len();
    let d = pixels.data();
    let saturated = (0..p)
        .filter(|&i| d[i] >= 1.0 && d[p + i] >= 1.0 && d[2 * p + i] >= 1.0)
        .count();
    let artifact = saturated as f64 / p as f64;
    let contrast = var.sqrt();
    let mut failed = Vec::new();
    if !(blur >= t.blur) {
        failed.push(QcCheck::Blur);
    }
    if !(contrast >= t.contrast) {
        failed.push(QcCheck::Contrast);
    }
    if !(t.illumination_lo..=t.illumination_hi).contains(&illumination) {
        failed.push(QcCheck::Illumination);
    }
    if !(artifact <= t.artifact) {
        failed.push(QcCheck::Artifact);
    }
    Ok(QualityReport {
        blur_score: blur,
        contrast_score: contrast,
        illumination_score: illumination,
        artifact_score: artifact,
        pass: failed.is_empty(),
        failed_checks: failed,
    })
}
