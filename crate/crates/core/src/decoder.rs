//! Lightweight UNet-style decoder with additive skips.
//!
//! `D_5 = φ_5(S'_5)` and `D_i = B_i(D_{i+1}) + φ_i(S'_i)` for `i = 4..1`,
//! where `φ_i` is a 1x1 projection and `B_i` is nearest 2x upsampling, a 3x3
//! convolution, batch normalization and ReLU6. A head upsamples `D_1` once
//! more and maps it to three channels. The decoder always runs dense.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::masking::NUM_SCALES;
use crate::nn::Session;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::sparse::{masked_batch_norm, BatchNorm};
use crate::tensor::Tensor;

/// Output channels of the reconstruction head.
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Width of `D_1..D_5`; `channels[i - 1]` is the output width of `φ_i`.
    pub channels: Vec<usize>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            channels: vec![64; NUM_SCALES],
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl DecoderConfig {
    /// Same width at every scale.
    pub fn uniform(width: usize) -> Self {
        Self {
            channels: vec![width; NUM_SCALES],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != NUM_SCALES {
            return Err(Error::Config(format!(
                "decoder needs {NUM_SCALES} channel widths, got {}",
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_eps must be > 0 and bn_momentum in [0, 1]".into()));
        }
        Ok(())
    }
}

/// A 1x1 convolution with bias.
#[derive(Clone, Debug)]
pub struct Pointwise {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Pointwise {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = (1.0 / cin as f64).sqrt();
        Ok(Self {
            weight: store.add(
                format!("{prefix}.weight"),
                Tensor::randn(&[cout, cin, 1, 1], std, rng),
                ParamKind::Weight,
            )?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[cout]), ParamKind::Weight)?,
            in_channels: cin,
            out_channels: cout,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let c = s.value(x).dims4()?.1;
        if c != self.in_channels {
            return Err(Error::Dimension(format!(
                "1x1 conv expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.graph.conv2d(x, w, Some(b), ConvSpec::default())
    }
}

/// `B_i`: upsample, 3x3 conv, batch norm, ReLU6.
#[derive(Clone, Debug)]
pub struct UpBlock {
    pub conv: ParamId,
    pub bn: BatchNorm,
}

impl UpBlock {
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let up = s.graph.upsample_nearest2x(x)?;
        let w = s.param(self.conv);
        let y = s.graph.conv2d(up, w, None, ConvSpec::new(1, 1, 1))?;
        let y = masked_batch_norm(s, y, None, &self.bn)?;
        s.graph.relu6(y)
    }
}

/// `D_1..D_5` of one decode.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub maps: Vec<Var>,
}

impl DecoderState {
    /// `D_i` for `i` in `1..=5`.
    pub fn d(&self, i: usize) -> Var {
        self.maps[i - 1]
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    config: DecoderConfig,
    phi: Vec<Pointwise>,
    blocks: Vec<UpBlock>,
    head: Pointwise,
}

impl Decoder {
    /// `encoder_channels[i - 1]` is the width of the encoder's `S_i`.
    pub fn new<R: Rng + ?Sized>(
        config: &DecoderConfig,
        encoder_channels: &[usize],
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if encoder_channels.len() != NUM_SCALES {
            return Err(Error::Config(format!(
                "decoder needs {NUM_SCALES} encoder widths, got {}",
                encoder_channels.len()
            )));
        }
        let ch = &config.channels;
        let phi = (1..=NUM_SCALES)
            .map(|i| Pointwise::new(store, &format!("{prefix}.phi{i}"), encoder_channels[i - 1], ch[i - 1], rng))
            .collect::<Result<Vec<_>>>()?;
        let mut blocks = Vec::with_capacity(NUM_SCALES - 1);
        for i in 1..NUM_SCALES {
            let (cin, cout) = (ch[i], ch[i - 1]);
            let std = (2.0 / (cin * 9) as f64).sqrt();
            blocks.push(UpBlock {
                conv: store.add(
                    format!("{prefix}.block{i}.conv.weight"),
                    Tensor::randn(&[cout, cin, 3, 3], std, rng),
                    ParamKind::Weight,
                )?,
                bn: BatchNorm::new(
                    store,
                    &format!("{prefix}.block{i}.bn"),
                    cout,
                    config.bn_eps,
                    config.bn_momentum,
                )?,
            });
        }
        let head = Pointwise::new(store, &format!("{prefix}.head"), ch[0], IMAGE_CHANNELS, rng)?;
        Ok(Self {
            config: config.clone(),
            phi,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    /// `φ_i`, `i` in `1..=5`.
    pub fn projection(&self, i: usize) -> &Pointwise {
        &self.phi[i - 1]
    }

    /// `B_i`, `i` in `1..=4`.
    pub fn block(&self, i: usize) -> &UpBlock {
        &self.blocks[i - 1]
    }

    pub fn head(&self) -> &Pointwise {
        &self.head
    }

    /// `φ_i(x)`.
    pub fn project(&self, s: &mut Session<'_>, i: usize, x: Var) -> Result<Var> {
        self.phi[i - 1].forward(s, x)
    }

    /// Runs the recursion over the densified maps `S'_1..S'_5`.
    pub fn decode(&self, s: &mut Session<'_>, s_prime: &[Var]) -> Result<DecoderState> {
        if s_prime.len() != NUM_SCALES {
            return Err(Error::Argument(format!(
                "decoder needs {NUM_SCALES} scale maps, got {}",
                s_prime.len()
            )));
        }
        let mut maps = vec![None; NUM_SCALES];
        let mut d = self.project(s, NUM_SCALES, s_prime[NUM_SCALES - 1])?;
        maps[NUM_SCALES - 1] = Some(d);
        for i in (1..NUM_SCALES).rev() {
            let up = self.blocks[i - 1].forward(s, d)?;
            let skip = self.project(s, i, s_prime[i - 1])?;
            if s.value(up).shape() != s.value(skip).shape() {
                return Err(Error::Geometry(format!(
                    "scale {i}: upsampled map {:?} does not match skip {:?}",
                    s.value(up).shape(),
                    s.value(skip).shape()
                )));
            }
            d = s.graph.add(up, skip)?;
            maps[i - 1] = Some(d);
        }
        Ok(DecoderState {
            maps: maps.into_iter().map(Option::unwrap).collect(),
        })
    }

    /// Upsamples `D_1` to input resolution and maps it to image channels.
    pub fn reconstruct_head(&self, s: &mut Session<'_>, d1: Var) -> Result<Var> {
        let up = s.graph.upsample_nearest2x(d1)?;
        self.head.forward(s, up)
    }

    /// `decode` followed by `reconstruct_head`.
    pub fn forward(&self, s: &mut Session<'_>, s_prime: &[Var]) -> Result<Var> {
        let state = self.decode(s, s_prime)?;
        self.reconstruct_head(s, state.d(1))
    }
}
