//! Assembled networks: the masked-image-modeling model used for pretraining
//! and the encoder-plus-head classifier used for fine-tuning.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig, EncoderOutput};
use crate::error::{Error, Result};
use crate::masking::{SpatialMask, NUM_SCALES};
use crate::nn::{Mode, Session};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::rng::{derive_seed, rng_from_seed};
use crate::sparse::{densify, MaskEmbedding, SparseExec, MASK_EMBEDDING_INIT_STD};
use crate::tensor::Tensor;

pub const ENCODER_PREFIX: &str = "encoder";
pub const EMBEDDING_PREFIX: &str = "mask_embedding";
pub const DECODER_PREFIX: &str = "decoder";
pub const HEAD_PREFIX: &str = "head";

const SALT_DECODER: u64 = 1;
const SALT_HEAD: u64 = 2;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

/// Intermediate values of one pretraining forward pass.
#[derive(Clone, Debug)]
pub struct MimForward {
    pub encoded: EncoderOutput,
    /// `S'_1..S'_5`.
    pub densified: Vec<Var>,
    pub recon: Var,
}

/// Sparse encoder, per-scale mask embeddings and decoder.
#[derive(Clone, Debug)]
pub struct MimModel {
    spec: ModelSpec,
    pub encoder: Encoder,
    pub embedding: MaskEmbedding,
    pub decoder: Decoder,
}

impl MimModel {
    /// Builds the model with deterministic initialization. Encoder weights
    /// equal those of `build_encoder` with the same seed.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<(Self, ParamStore)> {
        let (encoder, mut store, _) = crate::encoder::build_encoder(&spec.encoder, seed)?;
        let mut rng = rng_from_seed(derive_seed(seed, &[SALT_DECODER]));
        let embedding = MaskEmbedding::new(
            &mut store,
            EMBEDDING_PREFIX,
            encoder.scale_channels(),
            MASK_EMBEDDING_INIT_STD,
            &mut rng,
        )?;
        let decoder = Decoder::new(
            &spec.decoder,
            encoder.scale_channels(),
            &mut store,
            DECODER_PREFIX,
            &mut rng,
        )?;
        Ok((
            Self {
                spec: spec.clone(),
                encoder,
                embedding,
                decoder,
            },
            store,
        ))
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Masked encode, densify, decode and reconstruct. `masks` holds the
    /// batched mask at every level `0..=5`.
    pub fn forward(
        &self,
        s: &mut Session<'_>,
        images: Var,
        masks: &[Arc<SpatialMask>],
        exec: SparseExec,
    ) -> Result<MimForward> {
        let encoded = self.encoder.forward(s, images, Some(masks), exec)?;
        let densified = (1..=NUM_SCALES)
            .map(|i| densify(s, encoded.scale(i), &masks[i], &self.embedding, i))
            .collect::<Result<Vec<_>>>()?;
        let recon = self.decoder.forward(s, &densified)?;
        Ok(MimForward {
            encoded,
            densified,
            recon,
        })
    }

    /// Reconstruction of `input` scored against `target` on masked pixels.
    pub fn masked_loss(
        &self,
        s: &mut Session<'_>,
        input: &Tensor,
        target: &Tensor,
        masks: &[Arc<SpatialMask>],
        exec: SparseExec,
    ) -> Result<(Var, MimForward)> {
        let x = s.input(input.clone());
        let out = self.forward(s, x, masks, exec)?;
        let loss = s.graph.masked_mse(out.recon, target, &masks[0])?;
        Ok((loss, out))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSpec {
    pub encoder: EncoderConfig,
    pub num_classes: usize,
    #[serde(default)]
    pub head_dropout: f64,
}

/// Global average pool over `S_5`, dropout, affine map to logits.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dropout_p: f64,
}

impl ClassifierHead {
    pub fn forward(&self, s: &mut Session<'_>, features: Var) -> Result<Var> {
        let pooled = s.graph.global_avg_pool(features)?;
        let pooled = s.dropout(pooled, self.dropout_p)?;
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.graph.linear(pooled, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Classifier {
    spec: ClassifierSpec,
    pub encoder: Encoder,
    pub head: ClassifierHead,
}

/// Logits plus the encoder taps they were computed from.
#[derive(Clone, Debug)]
pub struct ClassifierForward {
    pub encoded: EncoderOutput,
    pub logits: Var,
}

impl Classifier {
    pub fn build(spec: &ClassifierSpec, seed: u64) -> Result<(Self, ParamStore)> {
        if spec.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                spec.num_classes
            )));
        }
        if !(0.0..1.0).contains(&spec.head_dropout) {
            return Err(Error::Config("head_dropout must be in [0, 1)".into()));
        }
        let (encoder, mut store, _) = crate::encoder::build_encoder(&spec.encoder, seed)?;
        let c = encoder.scale_channels()[NUM_SCALES - 1];
        let mut rng = rng_from_seed(derive_seed(seed, &[SALT_HEAD]));
        let head = ClassifierHead {
            weight: store.add(
                format!("{HEAD_PREFIX}.weight"),
                Tensor::randn(&[spec.num_classes, c], (1.0 / c as f64).sqrt(), &mut rng),
                ParamKind::Weight,
            )?,
            bias: store.add(
                format!("{HEAD_PREFIX}.bias"),
                Tensor::zeros(&[spec.num_classes]),
                ParamKind::Weight,
            )?,
            dropout_p: spec.head_dropout,
        };
        Ok((
            Self {
                spec: spec.clone(),
                encoder,
                head,
            },
            store,
        ))
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Dense forward. With `encoder_mode` set, the encoder runs in that mode
    /// and the head in the session's mode.
    pub fn forward(
        &self,
        s: &mut Session<'_>,
        images: Var,
        encoder_mode: Option<Mode>,
    ) -> Result<ClassifierForward> {
        let outer = s.mode();
        if let Some(m) = encoder_mode {
            s.set_mode(m);
        }
        let encoded = self.encoder.forward(s, images, None, SparseExec::Compact);
        s.set_mode(outer);
        let encoded = encoded?;
        let logits = self.head.forward(s, encoded.scale(NUM_SCALES))?;
        Ok(ClassifierForward { encoded, logits })
    }

    /// Class probabilities for a stack of images, in eval mode and in
    /// batches of `batch_size`.
    pub fn predict_proba(
        &self,
        store: &ParamStore,
        images: &[Tensor],
        batch_size: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch_size.max(1)) {
            let mut s = Session::new(store, Mode::Eval, 0);
            let x = s.input(Tensor::stack(chunk)?);
            let logits = self.forward(&mut s, x, None)?.logits;
            let (n, k) = s.value(logits).dims2()?;
            let z = s.value(logits).data();
            for r in 0..n {
                out.push(softmax(&z[r * k..(r + 1) * k]));
            }
        }
        Ok(out)
    }
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}
