//! Raw convolution and normalization kernels used by the autodiff graph.
//!
//! Convolution work is driven by *runs*: for each (sample, output row) a list
//! of half-open column ranges whose outputs are computed. A dense convolution
//! has one full-width run per row; a sparse one skips masked outputs. Per
//! output the accumulation order is always `(in_channel, ky, kx)` ascending,
//! so skipping work never changes the bits of the outputs that are computed.

use crate::error::{Error, Result};
use crate::masking::SpatialMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self::new(1, 0, 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub cin_g: usize,
    pub cout_g: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], spec: ConvSpec) -> Result<Self> {
        let (n, cin, h, w) = match *x_shape {
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(Error::Dimension(format!(
                    "conv2d input must be rank 4, got {x_shape:?}"
                )))
            }
        };
        let (cout, cin_g, kh, kw) = match *w_shape {
            [o, i, kh, kw] => (o, i, kh, kw),
            _ => {
                return Err(Error::Dimension(format!(
                    "conv2d weight must be rank 4, got {w_shape:?}"
                )))
            }
        };
        if spec.stride == 0 || spec.groups == 0 {
            return Err(Error::Argument("stride and groups must be positive".into()));
        }
        if cin % spec.groups != 0 || cout % spec.groups != 0 {
            return Err(Error::Dimension(format!(
                "channels {cin}->{cout} not divisible by {} groups",
                spec.groups
            )));
        }
        if cin / spec.groups != cin_g {
            return Err(Error::Dimension(format!(
                "weight expects {cin_g} input channels per group, input provides {}",
                cin / spec.groups
            )));
        }
        let (hp, wp) = (h + 2 * spec.padding, w + 2 * spec.padding);
        if hp < kh || wp < kw {
            return Err(Error::Geometry(format!(
                "kernel {kh}x{kw} larger than padded input {hp}x{wp}"
            )));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            cin_g,
            cout_g: cout / spec.groups,
            kh,
            kw,
            ho: (hp - kh) / spec.stride + 1,
            wo: (wp - kw) / spec.stride + 1,
            stride: spec.stride,
            pad: spec.padding,
        })
    }

    /// Pointwise convolutions are run over flattened planes.
    pub fn flattened(self) -> Self {
        if self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0 {
            Self {
                h: 1,
                w: self.h * self.w,
                ho: 1,
                wo: self.ho * self.wo,
                ..self
            }
        } else {
            self
        }
    }

    /// Output columns `[lo, hi)` whose input column `ox*s + kx - pad` is in range.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(self.stride)
        };
        let limit = self.w + self.pad;
        let hi = if limit > kx {
            ((limit - kx - 1) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = oy * self.stride + ky;
        (iy >= self.pad && iy - self.pad < self.h).then(|| iy - self.pad)
    }
}

/// Column runs per `(sample, output row)`.
pub(crate) struct Runs {
    rows: Vec<Vec<(usize, usize)>>,
    per_sample: usize,
    broadcast: bool,
}

impl Runs {
    pub fn dense(ho: usize, wo: usize) -> Self {
        Self {
            rows: vec![vec![(0, wo)]; ho],
            per_sample: ho,
            broadcast: true,
        }
    }

    /// Runs of visible positions; `mask` must have plane size `ho * wo`.
    pub fn from_mask(mask: &SpatialMask, ho: usize, wo: usize) -> Self {
        let samples = mask.batch();
        let mut rows = Vec::with_capacity(samples * ho);
        for b in 0..samples {
            let plane = mask.plane(b);
            for oy in 0..ho {
                let row = &plane[oy * wo..(oy + 1) * wo];
                let mut runs = Vec::new();
                let mut start = None;
                for (x, &v) in row.iter().enumerate() {
                    match (v, start) {
                        (true, None) => start = Some(x),
                        (false, Some(s)) => {
                            runs.push((s, x));
                            start = None;
                        }
                        _ => {}
                    }
                }
                if let Some(s) = start {
                    runs.push((s, wo));
                }
                rows.push(runs);
            }
        }
        Self {
            rows,
            per_sample: ho,
            broadcast: samples == 1,
        }
    }

    fn row(&self, b: usize, oy: usize) -> &[(usize, usize)] {
        let b = if self.broadcast { 0 } else { b };
        &self.rows[b * self.per_sample + oy]
    }
}

pub(crate) fn conv2d_forward(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
    runs: &Runs,
) -> Vec<f64> {
    let in_plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    let mut out = vec![0.0; g.n * g.cout * out_plane];
    for b in 0..g.n {
        for oc in 0..g.cout {
            let group = oc / g.cout_g;
            let obase = (b * g.cout + oc) * out_plane;
            let oplane = &mut out[obase..obase + out_plane];
            for icg in 0..g.cin_g {
                let ic = group * g.cin_g + icg;
                let ibase = (b * g.cin + ic) * in_plane;
                let iplane = &x[ibase..ibase + in_plane];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = weight[((oc * g.cin_g + icg) * g.kh + ky) * g.kw + kx];
                        let (lo, hi) = g.valid_cols(kx);
                        for oy in 0..g.ho {
                            let Some(iy) = g.input_row(oy, ky) else {
                                continue;
                            };
                            let irow = &iplane[iy * g.w..(iy + 1) * g.w];
                            let orow = &mut oplane[oy * g.wo..(oy + 1) * g.wo];
                            for &(a, e) in runs.row(b, oy) {
                                let (a, e) = (a.max(lo), e.min(hi));
                                if a >= e {
                                    continue;
                                }
                                let first = a * g.stride + kx - g.pad;
                                if g.stride == 1 {
                                    for (o, i) in orow[a..e].iter_mut().zip(&irow[first..]) {
                                        *o += wv * i;
                                    }
                                } else {
                                    for (j, o) in orow[a..e].iter_mut().enumerate() {
                                        *o += wv * irow[first + j * g.stride];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if let Some(bias) = bias {
                let bv = bias[oc];
                for oy in 0..g.ho {
                    for &(a, e) in runs.row(b, oy) {
                        for o in &mut oplane[oy * g.wo + a..oy * g.wo + e] {
                            *o += bv;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients of a convolution restricted to the outputs covered by `runs`.
pub(crate) fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    gout: &[f64],
    g: &ConvGeom,
    runs: &Runs,
    need_input: bool,
) -> ConvGrads {
    let in_plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    let mut gin = if need_input {
        vec![0.0; g.n * g.cin * in_plane]
    } else {
        Vec::new()
    };
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; g.cout];
    for b in 0..g.n {
        for oc in 0..g.cout {
            let group = oc / g.cout_g;
            let obase = (b * g.cout + oc) * out_plane;
            let gplane = &gout[obase..obase + out_plane];
            let mut bias_acc = 0.0;
            for oy in 0..g.ho {
                for &(a, e) in runs.row(b, oy) {
                    for v in &gplane[oy * g.wo + a..oy * g.wo + e] {
                        bias_acc += v;
                    }
                }
            }
            gb[oc] += bias_acc;
            for icg in 0..g.cin_g {
                let ic = group * g.cin_g + icg;
                let ibase = (b * g.cin + ic) * in_plane;
                let iplane = &x[ibase..ibase + in_plane];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let widx = ((oc * g.cin_g + icg) * g.kh + ky) * g.kw + kx;
                        let wv = weight[widx];
                        let (lo, hi) = g.valid_cols(kx);
                        let mut acc = 0.0;
                        for oy in 0..g.ho {
                            let Some(iy) = g.input_row(oy, ky) else {
                                continue;
                            };
                            let grow = &gplane[oy * g.wo..(oy + 1) * g.wo];
                            for &(a, e) in runs.row(b, oy) {
                                let (a, e) = (a.max(lo), e.min(hi));
                                if a >= e {
                                    continue;
                                }
                                let first = iy * g.w + a * g.stride + kx - g.pad;
                                if g.stride == 1 {
                                    let irow = &iplane[first..first + (e - a)];
                                    for (gv, iv) in grow[a..e].iter().zip(irow) {
                                        acc += gv * iv;
                                    }
                                    if need_input {
                                        let dst = &mut gin[ibase + first..ibase + first + (e - a)];
                                        for (d, gv) in dst.iter_mut().zip(&grow[a..e]) {
                                            *d += wv * gv;
                                        }
                                    }
                                } else {
                                    for (j, gv) in grow[a..e].iter().enumerate() {
                                        let ii = first + j * g.stride;
                                        acc += gv * iplane[ii];
                                        if need_input {
                                            gin[ibase + ii] += wv * gv;
                                        }
                                    }
                                }
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    ConvGrads {
        input: gin,
        weight: gw,
        bias: gb,
    }
}

/// Cached batch statistics needed by the normalization backward pass.
#[derive(Clone, Debug)]
pub(crate) struct NormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub count: usize,
    pub batch_stats: bool,
}

pub(crate) struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn plane_mask<'a>(mask: Option<&'a SpatialMask>, b: usize) -> Option<&'a [bool]> {
    mask.map(|m| m.plane(b))
}

/// Per-channel mean and population variance over visible positions.
pub(crate) fn masked_channel_stats(
    x: &[f64],
    dims: (usize, usize, usize, usize),
    mask: Option<&SpatialMask>,
) -> (NormStats, usize) {
    let (n, c, h, w) = dims;
    let plane = h * w;
    let count = match mask {
        Some(m) => m.visible_in_batch(n),
        None => n * plane,
    };
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            let p = &x[(b * c + ch) * plane..(b * c + ch + 1) * plane];
            match plane_mask(mask, b) {
                Some(m) => {
                    for (v, &keep) in p.iter().zip(m) {
                        if keep {
                            s += v;
                        }
                    }
                }
                None => s = p.iter().fold(s, |acc, v| acc + v),
            }
        }
        let mu = s / count as f64;
        let mut sq = 0.0;
        for b in 0..n {
            let p = &x[(b * c + ch) * plane..(b * c + ch + 1) * plane];
            match plane_mask(mask, b) {
                Some(m) => {
                    for (v, &keep) in p.iter().zip(m) {
                        if keep {
                            sq += (v - mu) * (v - mu);
                        }
                    }
                }
                None => sq = p.iter().fold(sq, |acc, v| acc + (v - mu) * (v - mu)),
            }
        }
        mean[ch] = mu;
        var[ch] = sq / count as f64;
    }
    (NormStats { mean, var }, count)
}

/// Normalizes with the given statistics; masked positions come out as `0.0`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn norm_forward(
    x: &[f64],
    dims: (usize, usize, usize, usize),
    mask: Option<&SpatialMask>,
    mean: &[f64],
    var: &[f64],
    eps: f64,
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = dims;
    let plane = h * w;
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for b in 0..n {
        let m = plane_mask(mask, b);
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for i in 0..plane {
                if m.is_none_or(|m| m[i]) {
                    let xh = (x[base + i] - mean[ch]) * inv_std[ch];
                    xhat[base + i] = xh;
                    y[base + i] = gamma[ch] * xh + beta[ch];
                }
            }
        }
    }
    (y, xhat, inv_std)
}

pub(crate) struct NormGrads {
    pub input: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub(crate) fn norm_backward(
    gy: &[f64],
    dims: (usize, usize, usize, usize),
    mask: Option<&SpatialMask>,
    gamma: &[f64],
    cache: &NormCache,
) -> NormGrads {
    let (n, c, h, w) = dims;
    let plane = h * w;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        let m = plane_mask(mask, b);
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for i in 0..plane {
                if m.is_none_or(|m| m[i]) {
                    dgamma[ch] += gy[base + i] * cache.xhat[base + i];
                    dbeta[ch] += gy[base + i];
                }
            }
        }
    }
    let mut dx = vec![0.0; gy.len()];
    let count = cache.count as f64;
    for b in 0..n {
        let m = plane_mask(mask, b);
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let scale = gamma[ch] * cache.inv_std[ch];
            for i in 0..plane {
                if m.is_none_or(|m| m[i]) {
                    dx[base + i] = if cache.batch_stats {
                        scale
                            * (gy[base + i]
                                - dbeta[ch] / count
                                - cache.xhat[base + i] * dgamma[ch] / count)
                    } else {
                        scale * gy[base + i]
                    };
                }
            }
        }
    }
    NormGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_cols_cover_padding() {
        let g = ConvGeom::new(&[1, 1, 5, 5], &[1, 1, 3, 3], ConvSpec::new(2, 1, 1)).unwrap();
        assert_eq!((g.ho, g.wo), (3, 3));
        // kx = 0 reads column 2*ox - 1, valid for ox >= 1
        assert_eq!(g.valid_cols(0), (1, 3));
        assert_eq!(g.valid_cols(1), (0, 3));
        // kx = 2 reads column 2*ox + 1, valid for ox <= 1
        assert_eq!(g.valid_cols(2), (0, 2));
    }

    #[test]
    fn runs_follow_visibility() {
        let m = SpatialMask::new(1, 1, 6, vec![true, true, false, true, false, true]).unwrap();
        let r = Runs::from_mask(&m, 1, 6);
        assert_eq!(r.row(3, 0), &[(0, 2), (3, 4), (5, 6)]);
    }
}
