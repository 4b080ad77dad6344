//! Grad-CAM on an encoder scale tap.

use crate::data::dims3;
use crate::error::{Error, Result};
use crate::masking::NUM_SCALES;
use crate::model::Classifier;
use crate::nn::{Mode, Session};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// A `[H, W]` map in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub map: Tensor,
    pub scale: usize,
    pub target_class: usize,
}

/// `ReLU(sum_k alpha_k A_k)` with `alpha_k` the spatial mean of the gradient
/// of channel `k`, min-max normalized. `activation` and `grad` are
/// `[C, h, w]`. A map with no spread is returned as all zeros.
pub fn cam_from(activation: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let (c, h, w) = dims3(activation)?;
    grad.expect_same_shape(activation)?;
    let p = h * w;
    let a = activation.data();
    let g = grad.data();
    let mut cam = vec![0.0; p];
    for k in 0..c {
        let alpha = g[k * p..(k + 1) * p].iter().sum::<f64>() / p as f64;
        for (v, &x) in cam.iter_mut().zip(&a[k * p..(k + 1) * p]) {
            *v += alpha * x;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let lo = cam.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = cam.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        cam.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    } else {
        cam.iter_mut().for_each(|v| *v = 0.0);
    }
    Tensor::new(vec![h, w], cam)
}

/// Nearest-neighbour resize of an `[h, w]` map.
pub fn upsample_nearest(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = map.dims2()?;
    let d = map.data();
    Ok(Tensor::from_fn(&[out_h, out_w], |i| {
        let (y, x) = (i / out_w, i % out_w);
        d[(y * h / out_h) * w + x * w / out_w]
    }))
}

/// Grad-CAM of `target_class` for one `[3, H, W]` image at encoder scale
/// `scale` (`1..=5`), computed in eval mode.
pub fn gradcam(
    model: &Classifier,
    store: &ParamStore,
    image: &Tensor,
    target_class: usize,
    scale: usize,
) -> Result<Heatmap> {
    if !(1..=NUM_SCALES).contains(&scale) {
        return Err(Error::Argument(format!("no encoder tap at scale {scale}")));
    }
    if target_class >= model.num_classes() {
        return Err(Error::Argument(format!("class {target_class} out of range")));
    }
    let (_, h, w) = dims3(image)?;
    let mut s = Session::new(store, Mode::Eval, 0);
    let x = s.input(Tensor::stack(std::slice::from_ref(image))?);
    let out = model.forward(&mut s, x, None)?;
    let k = model.num_classes();
    let onehot = Tensor::from_fn(&[1, k], |i| if i == target_class { 1.0 } else { 0.0 });
    let logit = s.graph.weighted_sum(out.logits, &onehot)?;
    let grads = s.backward(logit)?;
    let tap = out.encoded.scale(scale);
    let act = s.value(tap);
    let (_, c, th, tw) = act.dims4()?;
    let act = act.clone().reshape(&[c, th, tw])?;
    let grad = match grads.get(tap) {
        Some(g) => g.clone().reshape(&[c, th, tw])?,
        None => Tensor::zeros(&[c, th, tw]),
    };
    let cam = cam_from(&act, &grad)?;
    Ok(Heatmap {
        map: upsample_nearest(&cam, h, w)?,
        scale,
        target_class,
    })
}

/// Blends a jet-like colouring of `heat` over `image` with weight `alpha`.
pub fn overlay(image: &Tensor, heat: &Tensor, alpha: f64) -> Result<Tensor> {
    let (c, h, w) = dims3(image)?;
    if c != 3 || heat.shape() != [h, w] {
        return Err(Error::Dimension("overlay needs [3, H, W] and [H, W]".into()));
    }
    let p = h * w;
    let mut out = image.clone();
    let o = out.data_mut();
    for (i, &v) in heat.data().iter().enumerate() {
        let rgb = [
            (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0),
            (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0),
            (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0),
        ];
        for (ch, col) in rgb.iter().enumerate() {
            let px = &mut o[ch * p + i];
            *px = (1.0 - alpha) * *px + alpha * col;
        }
    }
    Ok(out)
}

