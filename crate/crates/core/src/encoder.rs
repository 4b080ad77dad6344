//! MobileNetV2-style hierarchical encoder built from inverted linear residual
//! bottleneck (ILRB) blocks.
//!
//! The encoder taps one feature map per resolution `S_i = (H / 2^i, W / 2^i)`,
//! `i = 1..=5`: the last activation computed at that resolution. It runs in
//! one of two forms sharing the same weights: dense (plain convolutions and
//! batch statistics) or sparse (mask-aware convolutions and masked batch
//! statistics driven by a mask pyramid).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::masking::{SpatialMask, DOWNSAMPLE_RATIO, NUM_SCALES};
use crate::nn::Session;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::rng::rng_from_seed;
use crate::sparse::{masked_batch_norm, sparse_conv, BatchNorm, SparseExec};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub out_channels: usize,
    /// Stride of the first block of the stage (1 or 2).
    pub stride: usize,
    /// Hidden-width multiplier of each block.
    pub expansion: f64,
    pub repeats: usize,
    /// Dropout probability after the depthwise convolution of each block.
    #[serde(default)]
    pub dropout_p: f64,
}

impl StageConfig {
    pub fn new(out_channels: usize, stride: usize, expansion: f64, repeats: usize) -> Self {
        Self {
            out_channels,
            stride,
            expansion,
            repeats,
            dropout_p: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub stages: Vec<StageConfig>,
    /// Optional permutation applied to the stages' `out_channels`; stage `k`
    /// takes the width of stage `channel_order[k]`.
    pub channel_order: Option<Vec<usize>>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for EncoderConfig {
    /// A desk-scale ladder with MobileNetV2 proportions.
    fn default() -> Self {
        let stage = |c, s, r, p| StageConfig {
            dropout_p: p,
            ..StageConfig::new(c, s, 4.0, r)
        };
        Self {
            in_channels: 3,
            stem_channels: 16,
            stem_stride: 2,
            stages: vec![
                stage(24, 2, 2, 0.0),
                stage(32, 2, 2, 0.0),
                stage(64, 2, 2, 0.1),
                stage(96, 1, 1, 0.1),
                stage(128, 2, 1, 0.2),
            ],
            channel_order: None,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl EncoderConfig {
    /// Stage widths after applying `channel_order`.
    pub fn stage_channels(&self) -> Result<Vec<usize>> {
        let widths: Vec<usize> = self.stages.iter().map(|s| s.out_channels).collect();
        match &self.channel_order {
            None => Ok(widths),
            Some(order) => {
                let mut seen = vec![false; widths.len()];
                if order.len() != widths.len() {
                    return Err(Error::Config(format!(
                        "channel_order has {} entries for {} stages",
                        order.len(),
                        widths.len()
                    )));
                }
                for &k in order {
                    if k >= widths.len() || std::mem::replace(&mut seen[k], true) {
                        return Err(Error::Config(format!(
                            "channel_order {order:?} is not a permutation"
                        )));
                    }
                }
                Ok(order.iter().map(|&k| widths[k]).collect())
            }
        }
    }

    /// Total downsampling factor `D`.
    pub fn downsample_ratio(&self) -> usize {
        self.stages
            .iter()
            .filter(|s| s.repeats > 0)
            .map(|s| s.stride)
            .product::<usize>()
            * self.stem_stride
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stem_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !matches!(self.stem_stride, 1 | 2) {
            return Err(Error::Config(format!(
                "stem stride must be 1 or 2, got {}",
                self.stem_stride
            )));
        }
        for (k, s) in self.stages.iter().enumerate() {
            if !matches!(s.stride, 1 | 2) {
                return Err(Error::Config(format!("stage {k}: stride must be 1 or 2")));
            }
            if s.expansion < 1.0 || !s.expansion.is_finite() {
                return Err(Error::Config(format!("stage {k}: expansion must be >= 1")));
            }
            if s.out_channels == 0 {
                return Err(Error::Config(format!("stage {k}: zero output channels")));
            }
            if !(0.0..1.0).contains(&s.dropout_p) {
                return Err(Error::Config(format!("stage {k}: dropout_p must be in [0, 1)")));
            }
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_eps must be > 0 and bn_momentum in [0, 1]".into()));
        }
        self.stage_channels()?;
        Ok(())
    }
}

/// Convolution followed by (masked) batch normalization and optional ReLU6.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub weight: ParamId,
    pub spec: ConvSpec,
    pub bn: BatchNorm,
    pub activation: bool,
}

/// He (fan-in) normal initialization for a conv weight.
fn he_weight(
    store: &mut ParamStore,
    name: String,
    shape: [usize; 4],
    rng: &mut crate::rng::SeededRng,
) -> Result<ParamId> {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    store.add(
        name,
        Tensor::randn(&shape, (2.0 / fan_in).sqrt(), rng),
        ParamKind::Weight,
    )
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: ConvSpec,
        activation: bool,
        cfg: &EncoderConfig,
        rng: &mut crate::rng::SeededRng,
    ) -> Result<Self> {
        let weight = he_weight(
            store,
            format!("{prefix}.conv.weight"),
            [cout, cin / spec.groups, kernel, kernel],
            rng,
        )?;
        let bn = BatchNorm::new(store, &format!("{prefix}.bn"), cout, cfg.bn_eps, cfg.bn_momentum)?;
        Ok(Self {
            weight,
            spec,
            bn,
            activation,
        })
    }

    fn forward(
        &self,
        s: &mut Session<'_>,
        x: Var,
        masks: Option<(&Arc<SpatialMask>, &Arc<SpatialMask>)>,
        exec: SparseExec,
    ) -> Result<Var> {
        let w = s.param(self.weight);
        let (y, out_mask) = match masks {
            Some((min, mout)) => (sparse_conv(s, x, w, None, self.spec, min, mout, exec)?, Some(mout)),
            None => (s.graph.conv2d(x, w, None, self.spec)?, None),
        };
        let y = masked_batch_norm(s, y, out_mask, &self.bn)?;
        if self.activation {
            s.graph.relu6(y)
        } else {
            Ok(y)
        }
    }
}

/// Inverted linear residual bottleneck: optional 1x1 expansion, 3x3
/// depthwise convolution, dropout, linear 1x1 projection, and a residual
/// connection when stride is 1 and widths match.
#[derive(Clone, Debug)]
pub struct InvertedResidual {
    pub expand: Option<ConvBn>,
    pub depthwise: ConvBn,
    pub project: ConvBn,
    pub dropout_p: f64,
    pub residual: bool,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl InvertedResidual {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        expansion: f64,
        dropout_p: f64,
        cfg: &EncoderConfig,
        rng: &mut crate::rng::SeededRng,
    ) -> Result<Self> {
        let hidden = ((cin as f64) * expansion).round() as usize;
        let expand = if hidden != cin {
            Some(ConvBn::new(
                store,
                &format!("{prefix}.expand"),
                cin,
                hidden,
                1,
                ConvSpec::default(),
                true,
                cfg,
                rng,
            )?)
        } else {
            None
        };
        let depthwise = ConvBn::new(
            store,
            &format!("{prefix}.depthwise"),
            hidden,
            hidden,
            3,
            ConvSpec::new(stride, 1, hidden),
            true,
            cfg,
            rng,
        )?;
        let project = ConvBn::new(
            store,
            &format!("{prefix}.project"),
            hidden,
            cout,
            1,
            ConvSpec::default(),
            false,
            cfg,
            rng,
        )?;
        Ok(Self {
            expand,
            depthwise,
            project,
            dropout_p,
            residual: stride == 1 && cin == cout,
            stride,
            in_channels: cin,
            out_channels: cout,
        })
    }

    fn forward(
        &self,
        s: &mut Session<'_>,
        x: Var,
        masks: Option<(&Arc<SpatialMask>, &Arc<SpatialMask>)>,
        exec: SparseExec,
    ) -> Result<Var> {
        let same = masks.map(|(min, _)| (min, min));
        let mut h = x;
        if let Some(e) = &self.expand {
            h = e.forward(s, h, same, exec)?;
        }
        h = self.depthwise.forward(s, h, masks, exec)?;
        h = s.dropout(h, self.dropout_p)?;
        let out_same = masks.map(|(_, mout)| (mout, mout));
        h = self.project.forward(s, h, out_same, exec)?;
        if self.residual {
            h = s.graph.add(h, x)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
struct Layer {
    block: InvertedResidual,
    in_scale: usize,
    out_scale: usize,
}

/// Per-scale encoder outputs `S_1..S_5`.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub scales: Vec<Var>,
}

impl EncoderOutput {
    /// Feature map at scale `i` (`1..=5`).
    pub fn scale(&self, i: usize) -> Var {
        self.scales[i - 1]
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    stem: ConvBn,
    layers: Vec<Layer>,
    scale_channels: Vec<usize>,
    reductions: usize,
}

impl Encoder {
    /// Registers the encoder's parameters under `prefix` in `store`.
    /// Accepts any reduction count; see [`build_encoder`] for the checked form.
    pub fn new(
        config: &EncoderConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut crate::rng::SeededRng,
    ) -> Result<Self> {
        config.validate()?;
        let widths = config.stage_channels()?;
        let stem = ConvBn::new(
            store,
            &format!("{prefix}.stem"),
            config.in_channels,
            config.stem_channels,
            3,
            ConvSpec::new(config.stem_stride, 1, 1),
            true,
            config,
            rng,
        )?;
        let mut scale = usize::from(config.stem_stride == 2);
        let mut scale_channels = vec![0; NUM_SCALES];
        if scale >= 1 {
            scale_channels[scale - 1] = config.stem_channels;
        }
        let mut cin = config.stem_channels;
        let mut layers = Vec::new();
        for (k, (stage, &cout)) in config.stages.iter().zip(&widths).enumerate() {
            for r in 0..stage.repeats {
                let stride = if r == 0 { stage.stride } else { 1 };
                let block = InvertedResidual::new(
                    store,
                    &format!("{prefix}.stage{k}.block{r}"),
                    cin,
                    cout,
                    stride,
                    stage.expansion,
                    stage.dropout_p,
                    config,
                    rng,
                )?;
                debug_assert_eq!(block.residual, stride == 1 && cin == cout);
                let in_scale = scale;
                if stride == 2 {
                    scale += 1;
                }
                if (1..=NUM_SCALES).contains(&scale) {
                    scale_channels[scale - 1] = cout;
                }
                layers.push(Layer {
                    block,
                    in_scale,
                    out_scale: scale,
                });
                cin = cout;
            }
        }
        Ok(Self {
            config: config.clone(),
            stem,
            layers,
            scale_channels,
            reductions: scale,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Channel count of `S_1..S_5`.
    pub fn scale_channels(&self) -> &[usize] {
        &self.scale_channels
    }

    pub fn blocks(&self) -> impl Iterator<Item = &InvertedResidual> {
        self.layers.iter().map(|l| &l.block)
    }

    /// Encodes `images: [N, C, H, W]`. With `masks` (one batched map per scale
    /// `0..=5`, as produced by [`crate::masking::batch_scales`]) every layer is
    /// mask-aware; without, the encoder runs dense.
    pub fn forward(
        &self,
        s: &mut Session<'_>,
        images: Var,
        masks: Option<&[Arc<SpatialMask>]>,
        exec: SparseExec,
    ) -> Result<EncoderOutput> {
        if self.reductions != NUM_SCALES {
            return Err(Error::Config(format!(
                "encoder has {} resolution reductions, {NUM_SCALES} are required",
                self.reductions
            )));
        }
        let (n, c, h, w) = s.value(images).dims4()?;
        if c != self.config.in_channels {
            return Err(Error::Dimension(format!(
                "encoder expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if h % DOWNSAMPLE_RATIO != 0 || w % DOWNSAMPLE_RATIO != 0 {
            return Err(Error::Geometry(format!(
                "input {h}x{w} is not divisible by {DOWNSAMPLE_RATIO}"
            )));
        }
        if let Some(m) = masks {
            if m.len() != NUM_SCALES + 1 {
                return Err(Error::Geometry(format!(
                    "expected {} mask levels, got {}",
                    NUM_SCALES + 1,
                    m.len()
                )));
            }
            for (i, level) in m.iter().enumerate() {
                level.check_fits(n, h >> i, w >> i).map_err(|_| {
                    Error::Geometry(format!("mask level {i} does not match input {h}x{w}"))
                })?;
            }
        }
        let pair = |a: usize, b: usize| masks.map(|m| (&m[a], &m[b]));
        let mut taps: Vec<Option<Var>> = vec![None; NUM_SCALES];
        let stem_out = usize::from(self.config.stem_stride == 2);
        let mut x = self.stem.forward(s, images, pair(0, stem_out), exec)?;
        if stem_out >= 1 {
            taps[stem_out - 1] = Some(x);
        }
        for layer in &self.layers {
            x = layer
                .block
                .forward(s, x, pair(layer.in_scale, layer.out_scale), exec)?;
            if layer.out_scale >= 1 {
                taps[layer.out_scale - 1] = Some(x);
            }
        }
        let scales = taps
            .into_iter()
            .map(|t| t.ok_or_else(|| Error::State("missing encoder scale tap".into())))
            .collect::<Result<_>>()?;
        Ok(EncoderOutput { scales })
    }
}

/// Builds an encoder with deterministic initialization from `seed`, requiring
/// the five-reduction (`D = 32`) geometry the masking scheme assumes.
/// Returns the encoder, its parameters and the trainable parameter count.
pub fn build_encoder(config: &EncoderConfig, seed: u64) -> Result<(Encoder, ParamStore, usize)> {
    let d = config.downsample_ratio();
    if d != DOWNSAMPLE_RATIO {
        return Err(Error::Config(format!(
            "encoder downsampling ratio is {d}, masking requires {DOWNSAMPLE_RATIO}"
        )));
    }
    let mut store = ParamStore::new();
    let mut rng = rng_from_seed(seed);
    let encoder = Encoder::new(config, &mut store, "encoder", &mut rng)?;
    let count = store.trainable_count("encoder.");
    Ok((encoder, store, count))
}
