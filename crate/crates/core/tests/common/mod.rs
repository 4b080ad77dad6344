#![allow(dead_code)]

use spmim::{Tensor, Result};

/// Direct sliding-window cross-correlation with zero padding, written
/// independently of the crate's run-based kernel.
pub fn naive_conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor {
    let (n, cin, h, wd) = x.dims4().unwrap();
    let (cout, cin_g, kh, kw) = w.dims4().unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let cout_g = cout / groups;
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    for b in 0..n {
        for oc in 0..cout {
            let g = oc / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for icg in 0..cin_g {
                        let ic = g * cin_g + icg;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()
                                    [((b * cin + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * cin_g + icg) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    if let Some(bias) = bias {
                        acc += bias.data()[oc];
                    }
                    out.data_mut()[((b * cout + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

/// `||a - b||_inf / max(||a||_inf, ||b||_inf)`, zero when both vanish.
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff = a.max_abs_diff(b).unwrap();
    let scale = a
        .data()
        .iter()
        .chain(b.data())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences over every coordinate of `x`, independent of the
/// library helper so the two can be cross-checked.
pub fn central_differences(mut f: impl FnMut(&Tensor) -> Result<f64>, x: &Tensor, h: f64) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let p = f(&probe).unwrap();
        probe.data_mut()[i] = orig - h;
        let m = f(&probe).unwrap();
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (p - m) / (2.0 * h);
    }
    out
}

/// Stem 8 at stride 1, then five stride-2 stages: `D = 32`.
pub fn tiny_encoder() -> spmim::EncoderConfig {
    use spmim::StageConfig;
    spmim::EncoderConfig {
        stem_channels: 8,
        stem_stride: 1,
        stages: vec![
            StageConfig::new(16, 2, 2.0, 1),
            StageConfig::new(24, 2, 2.0, 1),
            StageConfig::new(32, 2, 2.0, 1),
            StageConfig::new(48, 2, 2.0, 1),
            StageConfig::new(64, 2, 2.0, 1),
        ],
        ..spmim::EncoderConfig::default()
    }
}

/// Stride-2 stem and four thin stride-2 stages; cheap enough for
/// finite-difference sweeps.
pub fn micro_encoder() -> spmim::EncoderConfig {
    use spmim::StageConfig;
    spmim::EncoderConfig {
        stem_channels: 4,
        stem_stride: 2,
        stages: vec![
            StageConfig::new(4, 2, 1.0, 1),
            StageConfig::new(6, 2, 2.0, 1),
            StageConfig::new(6, 2, 1.0, 1),
            StageConfig::new(8, 2, 1.5, 1),
        ],
        ..spmim::EncoderConfig::default()
    }
}

/// Batched mask levels `0..=5` for per-sample random grids.
pub fn random_levels(n: usize, h: usize, w: usize, ratio: f64, seed: u64) -> Vec<std::sync::Arc<spmim::SpatialMask>> {
    let grids: Vec<_> = (0..n)
        .map(|i| spmim::sample_mask(h / 32, w / 32, ratio, seed.wrapping_add(i as u64)).unwrap())
        .collect();
    spmim::train::mask_levels(&grids, h, w).unwrap()
}

/// Replaces every masked pixel (per `pixels`, `[N, h, w]`) with a fresh
/// random value.
pub fn scramble_masked(x: &Tensor, pixels: &spmim::SpatialMask, seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = spmim::rng::rng_from_seed(seed);
    let (_, c, h, w) = x.dims4().unwrap();
    let mut out = x.clone();
    for (i, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
        for (v, &keep) in plane.iter_mut().zip(pixels.plane(i / c)) {
            if !keep {
                *v = rng.random::<f64>() * 10.0 - 5.0;
            }
        }
    }
    out
}

/// Per-class tp/fp/fn counted by scanning, no confusion matrix.
pub fn f1_oracle(labels: &[usize], preds: &[usize], k: usize) -> (f64, f64) {
    let n = labels.len() as f64;
    let acc = labels.iter().zip(preds).filter(|(a, b)| a == b).count() as f64 / n;
    let mut wf1 = 0.0;
    for c in 0..k {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fneg = 0.0;
        for (&l, &p) in labels.iter().zip(preds) {
            match (l == c, p == c) {
                (true, true) => tp += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fneg += 1.0,
                _ => {}
            }
        }
        let support = tp + fneg;
        let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fneg) };
        wf1 += support / n * f1;
    }
    (acc, wf1)
}

/// Kappa from explicit per-pair sums.
pub fn kappa_oracle(labels: &[usize], preds: &[usize], k: usize) -> Option<f64> {
    let n = labels.len() as f64;
    let w = |i: usize, j: usize| (i as f64 - j as f64).powi(2) / ((k - 1) as f64).powi(2);
    let observed: f64 = labels.iter().zip(preds).map(|(&a, &b)| w(a, b)).sum::<f64>() / n;
    let mut expected = 0.0;
    for &a in labels {
        for &b in preds {
            expected += w(a, b);
        }
    }
    expected /= n * n;
    (expected != 0.0).then(|| 1.0 - observed / expected)
}

pub fn auc_oracle(scores: &[f64], pos: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if pos[i] && !pos[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}
