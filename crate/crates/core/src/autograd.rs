//! Reverse-mode automatic differentiation over a closed set of primitives.
//!
//! A [`Graph`] is an eager tape: every operation computes its value
//! immediately and records what its backward pass needs. Nodes are stored in
//! creation order, which is a valid topological order.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{
    conv2d_backward, conv2d_forward, masked_channel_stats, norm_backward, norm_forward, ConvGeom,
    ConvSpec, NormCache, Runs,
};
use crate::masking::SpatialMask;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization statistics source.
#[derive(Clone, Debug)]
pub enum NormMode {
    /// Statistics of the current batch (visible positions only when masked).
    Batch { eps: f64 },
    /// Frozen running statistics.
    Running {
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
    },
}

/// Batch statistics observed by a normalization node in batch mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        mask_in: Option<Arc<SpatialMask>>,
        runs: Runs,
        masked_input: Option<Vec<f64>>,
    },
    Norm {
        input: Var,
        gamma: Var,
        beta: Var,
        mask: Option<Arc<SpatialMask>>,
        cache: NormCache,
    },
    Relu6(Var),
    Upsample2x(Var),
    Add(Var, Var),
    MaskZero {
        input: Var,
        mask: Arc<SpatialMask>,
    },
    Densify {
        input: Var,
        embedding: Var,
        mask: Arc<SpatialMask>,
    },
    Dropout {
        input: Var,
        scale: Vec<f64>,
    },
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    MaskedMse {
        recon: Var,
        target: Tensor,
        mask: Arc<SpatialMask>,
        count: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    WeightedSum {
        input: Var,
        weights: Tensor,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// An eager computation tape. Single-owner; not shared across threads.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], one optional slot per node.
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.slots.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.slots.get_mut(var.0).and_then(|g| g.take())
    }
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} produced NaN or Inf")))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool, what: &str) -> Result<Var> {
        check_finite(&value, what)?;
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Dense 2D cross-correlation. `groups == channels` gives a depthwise conv.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        self.conv_impl(input, weight, bias, spec, None, None)
    }

    /// Mask-aware convolution: masked inputs are read as zero and only visible
    /// outputs are computed; masked outputs are exactly `0.0`.
    pub fn sparse_conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
        mask_in: &Arc<SpatialMask>,
        mask_out: &Arc<SpatialMask>,
    ) -> Result<Var> {
        self.conv_impl(input, weight, bias, spec, Some(mask_in), Some(mask_out))
    }

    fn conv_impl(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
        mask_in: Option<&Arc<SpatialMask>>,
        mask_out: Option<&Arc<SpatialMask>>,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let full = ConvGeom::new(x.shape(), w.shape(), spec)?;
        if let Some(b) = bias {
            self.value(b).expect_shape(&[full.cout])?;
        }
        if let Some(m) = mask_in {
            m.check_fits(full.n, full.h, full.w)?;
        }
        if let Some(m) = mask_out {
            m.check_fits(full.n, full.ho, full.wo).map_err(|_| {
                Error::Geometry(format!(
                    "output mask {}x{} does not match conv output {}x{}",
                    m.height(),
                    m.width(),
                    full.ho,
                    full.wo
                ))
            })?;
        }
        let masked_input = mask_in.map(|m| {
            let mut data = x.data().to_vec();
            let plane = full.h * full.w;
            for (i, chunk) in data.chunks_mut(plane).enumerate() {
                for (v, &keep) in chunk.iter_mut().zip(m.plane(i / full.cin)) {
                    if !keep {
                        *v = 0.0;
                    }
                }
            }
            data
        });
        let geom = full.flattened();
        let runs = match mask_out {
            Some(m) => Runs::from_mask(m, geom.ho, geom.wo),
            None => Runs::dense(geom.ho, geom.wo),
        };
        let xdata = masked_input.as_deref().unwrap_or(x.data());
        let out = conv2d_forward(
            xdata,
            w.data(),
            bias.map(|b| self.value(b).data()),
            &geom,
            &runs,
        );
        let value = Tensor::new(vec![full.n, full.cout, full.ho, full.wo], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                mask_in: mask_in.cloned(),
                runs,
                masked_input,
            },
            value,
            rg,
            "conv2d",
        )
    }

    /// Per-channel affine normalization. With a mask, batch statistics come
    /// from visible positions only and masked outputs are `0.0`.
    ///
    /// Returns the node and, in batch mode, the statistics used.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mask: Option<&Arc<SpatialMask>>,
        mode: &NormMode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let x = self.value(input);
        let dims = x.dims4()?;
        let (n, c, h, w) = dims;
        self.value(gamma).expect_shape(&[c])?;
        self.value(beta).expect_shape(&[c])?;
        if let Some(m) = mask {
            m.check_fits(n, h, w)?;
        }
        let (mean, var, eps, count, stats) = match mode {
            NormMode::Batch { eps } => {
                let (stats, count) = masked_channel_stats(x.data(), dims, mask.map(|m| &**m));
                if count == 0 {
                    return Err(Error::Degenerate(
                        "batch norm over zero visible positions".into(),
                    ));
                }
                let out = BatchStats {
                    mean: stats.mean.clone(),
                    var: stats.var.clone(),
                };
                (stats.mean, stats.var, *eps, count, Some(out))
            }
            NormMode::Running { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Dimension(format!(
                        "running statistics have {} channels, input has {c}",
                        mean.len()
                    )));
                }
                (mean.clone(), var.clone(), *eps, 0, None)
            }
        };
        let (y, xhat, inv_std) = norm_forward(
            x.data(),
            dims,
            mask.map(|m| &**m),
            &mean,
            &var,
            eps,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let value = Tensor::new(x.shape().to_vec(), y)?;
        let rg = self.rg(&[input, gamma, beta]);
        let node = self.push(
            Op::Norm {
                input,
                gamma,
                beta,
                mask: mask.cloned(),
                cache: NormCache {
                    xhat,
                    inv_std,
                    count,
                    batch_stats: matches!(mode, NormMode::Batch { .. }),
                },
            },
            value,
            rg,
            "batch_norm",
        )?;
        Ok((node, stats))
    }

    pub fn relu6(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(|v| v.clamp(0.0, 6.0));
        let rg = self.rg(&[input]);
        self.push(Op::Relu6(input), value, rg, "relu6")
    }

    /// Nearest-neighbour upsampling by two: each pixel becomes a 2x2 block.
    pub fn upsample_nearest2x(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        let (h2, w2) = (2 * h, 2 * w);
        let src = x.data();
        let mut out = vec![0.0; n * c * h2 * w2];
        for p in 0..n * c {
            for y in 0..h2 {
                let srow = &src[p * h * w + (y / 2) * w..p * h * w + (y / 2 + 1) * w];
                let drow = &mut out[p * h2 * w2 + y * w2..p * h2 * w2 + (y + 1) * w2];
                for (x2, d) in drow.iter_mut().enumerate() {
                    *d = srow[x2 / 2];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h2, w2], out)?;
        let rg = self.rg(&[input]);
        self.push(Op::Upsample2x(input), value, rg, "upsample_nearest2x")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(Op::Add(a, b), value, rg, "add")
    }

    pub fn mask_zero(&mut self, input: Var, mask: &Arc<SpatialMask>) -> Result<Var> {
        let value = crate::masking::apply_mask_zero(self.value(input), mask)?;
        let rg = self.rg(&[input]);
        self.push(
            Op::MaskZero {
                input,
                mask: mask.clone(),
            },
            value,
            rg,
            "mask_zero",
        )
    }

    /// Visible positions copy `input`; masked positions take the per-channel
    /// `embedding` vector.
    pub fn densify(&mut self, input: Var, embedding: Var, mask: &Arc<SpatialMask>) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        mask.check_fits(n, h, w)?;
        let e = self.value(embedding);
        if e.shape() != [c] {
            return Err(Error::Dimension(format!(
                "mask embedding has shape {:?}, features have {c} channels",
                e.shape()
            )));
        }
        let mut out = x.data().to_vec();
        let plane = h * w;
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let ev = e.data()[i % c];
            for (v, &keep) in chunk.iter_mut().zip(mask.plane(i / c)) {
                if !keep {
                    *v = ev;
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(&[input, embedding]);
        self.push(
            Op::Densify {
                input,
                embedding,
                mask: mask.clone(),
            },
            value,
            rg,
            "densify",
        )
    }

    /// Multiplies elementwise by a precomputed keep-and-rescale vector.
    pub fn dropout_with_scale(&mut self, input: Var, scale: Vec<f64>) -> Result<Var> {
        let x = self.value(input);
        if scale.len() != x.len() {
            return Err(Error::Dimension("dropout scale length mismatch".into()));
        }
        let value = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(&scale).map(|(v, s)| v * s).collect(),
        )?;
        let rg = self.rg(&[input]);
        self.push(Op::Dropout { input, scale }, value, rg, "dropout")
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        let plane = (h * w) as f64;
        let data = x
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / plane)
            .collect();
        let value = Tensor::new(vec![n, c], data)?;
        let rg = self.rg(&[input]);
        self.push(Op::GlobalAvgPool(input), value, rg, "global_avg_pool")
    }

    /// `x W^T + b` for `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, din) = self.value(input).dims2()?;
        let (dout, win) = self.value(weight).dims2()?;
        if din != win {
            return Err(Error::Dimension(format!(
                "linear layer expects {win} features, got {din}"
            )));
        }
        self.value(bias).expect_shape(&[dout])?;
        let (x, w, b) = (
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let mut out = vec![0.0; n * dout];
        for i in 0..n {
            for o in 0..dout {
                let dot: f64 = x[i * din..(i + 1) * din]
                    .iter()
                    .zip(&w[o * din..(o + 1) * din])
                    .map(|(a, b)| a * b)
                    .sum();
                out[i * dout + o] = dot + b[o];
            }
        }
        let value = Tensor::new(vec![n, dout], out)?;
        let rg = self.rg(&[input, weight, bias]);
        self.push(
            Op::Linear {
                input,
                weight,
                bias,
            },
            value,
            rg,
            "linear",
        )
    }

    /// Mean squared error over masked pixels (all channels, whole batch).
    /// Visible pixels contribute exactly nothing.
    pub fn masked_mse(&mut self, recon: Var, target: &Tensor, pixel_mask: &Arc<SpatialMask>) -> Result<Var> {
        let r = self.value(recon);
        r.expect_same_shape(target)?;
        let (n, c, h, w) = r.dims4()?;
        pixel_mask.check_fits(n, h, w)?;
        let masked_pixels = n * h * w - pixel_mask.visible_in_batch(n);
        if masked_pixels == 0 {
            return Err(Error::Degenerate(
                "masked MSE is undefined without masked pixels".into(),
            ));
        }
        let count = masked_pixels * c;
        let plane = h * w;
        let mut sum = 0.0;
        for (i, (rp, tp)) in r
            .data()
            .chunks(plane)
            .zip(target.data().chunks(plane))
            .enumerate()
        {
            for ((a, b), &keep) in rp.iter().zip(tp).zip(pixel_mask.plane(i / c)) {
                if !keep {
                    sum += (a - b) * (a - b);
                }
            }
        }
        let value = Tensor::scalar(sum / count as f64);
        let rg = self.rg(&[recon]);
        self.push(
            Op::MaskedMse {
                recon,
                target: target.clone(),
                mask: pixel_mask.clone(),
                count,
            },
            value,
            rg,
            "masked_mse",
        )
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(Error::Dimension(format!(
                "{} labels for {n} logit rows",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Argument(format!("label {bad} outside 0..{k}")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &z[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - max).exp() / denom;
            }
            loss += denom.ln() + max - row[labels[i]];
        }
        let value = Tensor::scalar(loss / n as f64);
        let rg = self.rg(&[logits]);
        self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            value,
            rg,
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.rg(&[input]);
        self.push(Op::Sum(input), value, rg, "sum")
    }

    /// `sum(input * weights)` for a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, input: Var, weights: &Tensor) -> Result<Var> {
        let x = self.value(input);
        x.expect_same_shape(weights)?;
        let value = Tensor::scalar(x.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum());
        let rg = self.rg(&[input]);
        self.push(
            Op::WeightedSum {
                input,
                weights: weights.clone(),
            },
            value,
            rg,
            "weighted_sum",
        )
    }

    /// Gradients of the scalar `loss` with respect to every node that requires
    /// one. Nodes the loss does not depend on keep an empty slot.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self.nodes.get(loss.0).ok_or_else(|| {
            Error::State(format!(
                "backward on node {} which has not been evaluated in this graph",
                loss.0
            ))
        })?;
        if !node.value.is_scalar() {
            return Err(Error::State(format!(
                "backward requires a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut slots: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Tensor::full(node.value.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let Some(gout) = slots[id].take() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &gout, &mut slots)?;
            slots[id] = Some(gout);
        }
        Ok(Gradients { slots })
    }

    fn accumulate(&self, slots: &mut [Option<Tensor>], var: Var, grad: Tensor) -> Result<()> {
        if !self.nodes[var.0].requires_grad {
            return Ok(());
        }
        match &mut slots[var.0] {
            Some(existing) => existing.add_assign(&grad),
            slot @ None => {
                *slot = Some(grad);
                Ok(())
            }
        }
    }

    fn propagate(&self, id: usize, gout: &Tensor, slots: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                mask_in,
                runs,
                masked_input,
            } => {
                let x = masked_input
                    .as_deref()
                    .unwrap_or(self.value(*input).data());
                let need_input = self.requires_grad(*input);
                let grads = conv2d_backward(
                    x,
                    self.value(*weight).data(),
                    gout.data(),
                    geom,
                    runs,
                    need_input,
                );
                if need_input {
                    let mut gin = grads.input;
                    if let Some(m) = mask_in {
                        let plane = m.height() * m.width();
                        let cin = self.value(*input).shape()[1];
                        for (i, chunk) in gin.chunks_mut(plane).enumerate() {
                            for (v, &keep) in chunk.iter_mut().zip(m.plane(i / cin)) {
                                if !keep {
                                    *v = 0.0;
                                }
                            }
                        }
                    }
                    let shape = self.value(*input).shape().to_vec();
                    self.accumulate(slots, *input, Tensor::new(shape, gin)?)?;
                }
                let wshape = self.value(*weight).shape().to_vec();
                self.accumulate(slots, *weight, Tensor::new(wshape, grads.weight)?)?;
                if let Some(b) = bias {
                    let n = grads.bias.len();
                    self.accumulate(slots, *b, Tensor::new(vec![n], grads.bias)?)?;
                }
            }
            Op::Norm {
                input,
                gamma,
                beta,
                mask,
                cache,
            } => {
                let x = self.value(*input);
                let dims = x.dims4()?;
                let grads = norm_backward(
                    gout.data(),
                    dims,
                    mask.as_deref(),
                    self.value(*gamma).data(),
                    cache,
                );
                let c = dims.1;
                self.accumulate(slots, *input, Tensor::new(x.shape().to_vec(), grads.input)?)?;
                self.accumulate(slots, *gamma, Tensor::new(vec![c], grads.gamma)?)?;
                self.accumulate(slots, *beta, Tensor::new(vec![c], grads.beta)?)?;
            }
            Op::Relu6(input) => {
                let x = self.value(*input);
                let g = x.zip_map(gout, |v, g| if v > 0.0 && v < 6.0 { g } else { 0.0 })?;
                self.accumulate(slots, *input, g)?;
            }
            Op::Upsample2x(input) => {
                let x = self.value(*input);
                let (n, c, h, w) = x.dims4()?;
                let w2 = 2 * w;
                let g = gout.data();
                let mut gin = vec![0.0; x.len()];
                for p in 0..n * c {
                    let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            let top = 2 * y * w2 + 2 * xx;
                            let bot = top + w2;
                            gin[p * h * w + y * w + xx] =
                                src[top] + src[top + 1] + src[bot] + src[bot + 1];
                        }
                    }
                }
                self.accumulate(slots, *input, Tensor::new(x.shape().to_vec(), gin)?)?;
            }
            Op::Add(a, b) => {
                self.accumulate(slots, *a, gout.clone())?;
                self.accumulate(slots, *b, gout.clone())?;
            }
            Op::MaskZero { input, mask } => {
                let g = crate::masking::apply_mask_zero(gout, mask)?;
                self.accumulate(slots, *input, g)?;
            }
            Op::Densify {
                input,
                embedding,
                mask,
            } => {
                let (_, c, h, w) = gout.dims4()?;
                let plane = h * w;
                let mut gin = gout.data().to_vec();
                let mut ge = vec![0.0; c];
                for (i, chunk) in gin.chunks_mut(plane).enumerate() {
                    for (v, &keep) in chunk.iter_mut().zip(mask.plane(i / c)) {
                        if !keep {
                            ge[i % c] += *v;
                            *v = 0.0;
                        }
                    }
                }
                self.accumulate(slots, *input, Tensor::new(gout.shape().to_vec(), gin)?)?;
                self.accumulate(slots, *embedding, Tensor::new(vec![c], ge)?)?;
            }
            Op::Dropout { input, scale } => {
                let g = Tensor::new(
                    gout.shape().to_vec(),
                    gout.data().iter().zip(scale).map(|(g, s)| g * s).collect(),
                )?;
                self.accumulate(slots, *input, g)?;
            }
            Op::GlobalAvgPool(input) => {
                let x = self.value(*input);
                let (_, _, h, w) = x.dims4()?;
                let plane = h * w;
                let inv = 1.0 / plane as f64;
                let mut gin = vec![0.0; x.len()];
                for (chunk, g) in gin.chunks_mut(plane).zip(gout.data()) {
                    chunk.fill(g * inv);
                }
                self.accumulate(slots, *input, Tensor::new(x.shape().to_vec(), gin)?)?;
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (n, din) = self.value(*input).dims2()?;
                let (dout, _) = self.value(*weight).dims2()?;
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                let g = gout.data();
                let mut gx = vec![0.0; n * din];
                let mut gw = vec![0.0; dout * din];
                let mut gb = vec![0.0; dout];
                for i in 0..n {
                    for o in 0..dout {
                        let go = g[i * dout + o];
                        gb[o] += go;
                        for k in 0..din {
                            gx[i * din + k] += go * w[o * din + k];
                            gw[o * din + k] += go * x[i * din + k];
                        }
                    }
                }
                self.accumulate(slots, *input, Tensor::new(vec![n, din], gx)?)?;
                self.accumulate(slots, *weight, Tensor::new(vec![dout, din], gw)?)?;
                self.accumulate(slots, *bias, Tensor::new(vec![dout], gb)?)?;
            }
            Op::MaskedMse {
                recon,
                target,
                mask,
                count,
            } => {
                let r = self.value(*recon);
                let (_, c, h, w) = r.dims4()?;
                let scale = 2.0 * gout.item()? / *count as f64;
                let mut g = vec![0.0; r.len()];
                let plane = h * w;
                for (i, ((gp, rp), tp)) in g
                    .chunks_mut(plane)
                    .zip(r.data().chunks(plane))
                    .zip(target.data().chunks(plane))
                    .enumerate()
                {
                    for (((gv, a), b), &keep) in
                        gp.iter_mut().zip(rp).zip(tp).zip(mask.plane(i / c))
                    {
                        if !keep {
                            *gv = scale * (a - b);
                        }
                    }
                }
                self.accumulate(slots, *recon, Tensor::new(r.shape().to_vec(), g)?)?;
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (n, k) = self.value(*logits).dims2()?;
                let scale = gout.item()? / n as f64;
                let mut g = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    g[i * k + l] -= 1.0;
                }
                for v in &mut g {
                    *v *= scale;
                }
                self.accumulate(slots, *logits, Tensor::new(vec![n, k], g)?)?;
            }
            Op::Sum(input) => {
                let s = gout.item()?;
                let shape = self.value(*input).shape().to_vec();
                self.accumulate(slots, *input, Tensor::full(&shape, s))?;
            }
            Op::WeightedSum { input, weights } => {
                let s = gout.item()?;
                self.accumulate(slots, *input, weights.map(|w| w * s))?;
            }
        }
        Ok(())
    }
}

/// Central-difference gradient estimate `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_difference_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "function is not finite around coordinate {i}"
            )));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}
