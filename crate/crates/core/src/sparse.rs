//! Mask-aware layers: sparse convolution, masked batch normalization and the
//! per-scale mask embedding used to densify encoder features.
//!
//! Sparse convolution is the zero-in/zero-out construction: masked inputs are
//! read as zero and masked outputs are forced to zero. The default execution
//! path only computes visible outputs (see [`SparseExec`]); both paths produce
//! identical bits.

use std::sync::Arc;

use rand::Rng;

use crate::autograd::{NormMode, Var};
use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::masking::{SpatialMask, NUM_SCALES};
use crate::nn::{Mode, RunningUpdate, Session};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Execution strategy for sparse convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SparseExec {
    /// Skip masked outputs entirely.
    #[default]
    Compact,
    /// Dense convolution of the zeroed input, then zero the masked outputs.
    Emulate,
}

/// `conv2d(apply_mask_zero(x, mask_in)) -> apply_mask_zero(., mask_out)`.
#[allow(clippy::too_many_arguments)]
pub fn sparse_conv(
    s: &mut Session<'_>,
    input: Var,
    weight: Var,
    bias: Option<Var>,
    spec: ConvSpec,
    mask_in: &Arc<SpatialMask>,
    mask_out: &Arc<SpatialMask>,
    exec: SparseExec,
) -> Result<Var> {
    match exec {
        SparseExec::Compact => s
            .graph
            .sparse_conv2d(input, weight, bias, spec, mask_in, mask_out),
        SparseExec::Emulate => {
            let zeroed = s.graph.mask_zero(input, mask_in)?;
            let y = s.graph.conv2d(zeroed, weight, bias, spec)?;
            let (n, _, h, w) = s.value(y).dims4()?;
            mask_out.check_fits(n, h, w).map_err(|_| {
                Error::Geometry(format!(
                    "output mask {}x{} does not match conv output {h}x{w}",
                    mask_out.height(),
                    mask_out.width()
                ))
            })?;
            s.graph.mask_zero(y, mask_out)
        }
    }
}

/// Batch normalization parameters and running statistics, stored by id.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, eps: f64, momentum: f64) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full(&[channels], 1.0), ParamKind::Weight)?,
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[channels]), ParamKind::Weight)?,
            running_mean: store.add(
                format!("{prefix}.running_mean"),
                Tensor::zeros(&[channels]),
                ParamKind::Buffer,
            )?,
            running_var: store.add(
                format!("{prefix}.running_var"),
                Tensor::full(&[channels], 1.0),
                ParamKind::Buffer,
            )?,
            eps,
            momentum,
        })
    }

    pub fn channels(&self, store: &ParamStore) -> usize {
        store.get(self.gamma).len()
    }
}

/// Batch normalization whose statistics ignore masked positions.
///
/// Train mode normalizes with the per-channel mean and population variance of
/// the visible positions of the whole batch and queues a running-statistics
/// update; eval mode uses the running statistics. Masked outputs are `0.0`.
pub fn masked_batch_norm(
    s: &mut Session<'_>,
    x: Var,
    mask: Option<&Arc<SpatialMask>>,
    bn: &BatchNorm,
) -> Result<Var> {
    let gamma = s.param(bn.gamma);
    let beta = s.param(bn.beta);
    let mode = match s.mode() {
        Mode::Train => NormMode::Batch { eps: bn.eps },
        Mode::Eval => NormMode::Running {
            mean: s.store().get(bn.running_mean).data().to_vec(),
            var: s.store().get(bn.running_var).data().to_vec(),
            eps: bn.eps,
        },
    };
    let (y, stats) = s.graph.batch_norm(x, gamma, beta, mask, &mode)?;
    if let Some(stats) = stats {
        s.updates.push(RunningUpdate {
            mean: bn.running_mean,
            var: bn.running_var,
            momentum: bn.momentum,
            stats,
        });
    }
    Ok(y)
}

/// Learned per-scale vectors substituted at masked positions.
#[derive(Clone, Debug)]
pub struct MaskEmbedding {
    vectors: Vec<ParamId>,
}

/// Standard deviation of the mask-embedding initialization.
pub const MASK_EMBEDDING_INIT_STD: f64 = 0.02;

impl MaskEmbedding {
    /// One vector per scale; `channels[i]` is the encoder width at scale `i + 1`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: &[usize],
        init_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if channels.len() != NUM_SCALES {
            return Err(Error::Config(format!(
                "mask embedding needs {NUM_SCALES} scales, got {}",
                channels.len()
            )));
        }
        let vectors = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                store.add(
                    format!("{prefix}.scale{}", i + 1),
                    Tensor::randn(&[c], init_std, rng),
                    ParamKind::Weight,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { vectors })
    }

    /// Parameter holding the vector for scale `i` (`1..=5`).
    pub fn vector(&self, scale: usize) -> ParamId {
        self.vectors[scale - 1]
    }
}

/// Builds `S'_i`: visible positions copy `features`, masked positions take the
/// scale's embedding vector.
pub fn densify(
    s: &mut Session<'_>,
    features: Var,
    mask: &Arc<SpatialMask>,
    embedding: &MaskEmbedding,
    scale: usize,
) -> Result<Var> {
    let e = s.param(embedding.vector(scale));
    s.graph.densify(features, e, mask)
}
