//! Pretraining and fine-tuning loops, the AdamP optimizer and checkpoints.

pub mod adamp;
pub mod checkpoint;

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::augment::{augment, AugmentPolicy};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::masking::{batch_scales, build_mask_pyramid, sample_mask, MaskGrid, SpatialMask, DOWNSAMPLE_RATIO};
use crate::model::{Classifier, ClassifierSpec, MimModel, ModelSpec, ENCODER_PREFIX};
use crate::nn::{apply_running_updates, Mode, RunningUpdateHandle, Session};
use crate::params::ParamStore;
use crate::rng::{derive_seed, rng_from_seed};
use crate::sparse::SparseExec;
use crate::tensor::Tensor;

use adamp::{AdamP, AdamPConfig};
use checkpoint::{Checkpoint, ModelSnapshot};

const SALT_SHUFFLE: u64 = 11;
const SALT_MASK: u64 = 12;
const SALT_AUGMENT: u64 = 13;
const SALT_DROPOUT: u64 = 14;

/// Learning-rate schedule over the whole run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from the base rate to zero.
    Cosine,
}

impl LrSchedule {
    pub fn lr(self, base: f64, step: u64, total: u64) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = (step as f64 / total.max(1) as f64).min(1.0);
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_ratio: f64,
    /// Seed for mask sampling; the run seed when unset.
    pub mask_seed: Option<u64>,
    pub optimizer: AdamPConfig,
    pub schedule: LrSchedule,
    pub augment: Option<AugmentPolicy>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            mask_ratio: 0.6,
            mask_seed: None,
            optimizer: AdamPConfig::default(),
            schedule: LrSchedule::Constant,
            augment: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub num_classes: usize,
    pub head_dropout: f64,
    /// Train only the classifier head; the encoder runs in eval mode.
    pub freeze_encoder: bool,
    pub optimizer: AdamPConfig,
    pub schedule: LrSchedule,
    pub augment: Option<AugmentPolicy>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 16,
            num_classes: 2,
            head_dropout: 0.2,
            freeze_encoder: false,
            optimizer: AdamPConfig::default(),
            schedule: LrSchedule::Constant,
            augment: None,
        }
    }
}

/// One line of the training report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

/// Masked MSE of a reconstruction: squared error averaged over the masked
/// pixels (all channels) of the whole batch. `masks[k]` is sample `k`'s grid.
pub fn masked_mse_loss(recon: &Tensor, target: &Tensor, masks: &[MaskGrid]) -> Result<f64> {
    let (n, _, h, w) = recon.dims4()?;
    if masks.len() != n {
        return Err(Error::Argument(format!("{} masks for a batch of {n}", masks.len())));
    }
    let levels = mask_levels(masks, h, w)?;
    let mut g = Graph::new();
    let r = g.constant(recon.clone());
    let loss = g.masked_mse(r, target, &levels[0])?;
    g.value(loss).item()
}

/// Batched masks at levels `0..=5` for per-sample base grids.
pub fn mask_levels(masks: &[MaskGrid], h: usize, w: usize) -> Result<Vec<Arc<SpatialMask>>> {
    let pyramids = masks
        .iter()
        .map(|m| build_mask_pyramid(m.clone(), h, w))
        .collect::<Result<Vec<_>>>()?;
    Ok(batch_scales(&pyramids)?.into_iter().map(Arc::new).collect())
}

fn check_images(data: &[Tensor]) -> Result<(usize, usize)> {
    let first = data
        .first()
        .ok_or_else(|| Error::Argument("empty dataset".into()))?;
    let shape = first.shape().to_vec();
    if shape.len() != 3 || shape[1] % DOWNSAMPLE_RATIO != 0 || shape[2] % DOWNSAMPLE_RATIO != 0 {
        return Err(Error::Geometry(format!(
            "images must be [C, H, W] with H, W divisible by {DOWNSAMPLE_RATIO}, got {shape:?}"
        )));
    }
    for t in data {
        t.expect_shape(&shape)?;
    }
    Ok((shape[1], shape[2]))
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(derive_seed(seed, &[SALT_SHUFFLE, epoch as u64])));
    order
}

fn steps_per_epoch(n: usize, batch: usize) -> u64 {
    n.div_ceil(batch) as u64
}

fn prepare(image: &Tensor, policy: Option<&AugmentPolicy>, seed: u64, epoch: usize, index: usize) -> Result<Tensor> {
    match policy {
        Some(p) => augment(image, p, derive_seed(seed, &[SALT_AUGMENT, epoch as u64, index as u64])),
        None => Ok(image.clone()),
    }
}

/// Applies one optimizer step from a finished session's gradients.
fn apply_step(
    store: &mut ParamStore,
    optimizer: &mut AdamP,
    grads: Vec<Option<Tensor>>,
    updates: Vec<RunningUpdateHandle>,
    lr: f64,
) -> Result<()> {
    optimizer.step_with_lr(store, &grads, lr)?;
    apply_running_updates(store, updates);
    Ok(())
}

/// Masked-image-modeling pretraining state.
pub struct Pretrainer {
    pub model: MimModel,
    pub store: ParamStore,
    pub optimizer: AdamP,
    pub config: PretrainConfig,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub exec: SparseExec,
}

impl Pretrainer {
    pub fn new(spec: &ModelSpec, config: PretrainConfig, seed: u64) -> Result<Self> {
        let (model, store) = MimModel::build(spec, seed)?;
        Self::assemble(model, store, None, config, seed, 0)
    }

    fn assemble(
        model: MimModel,
        store: ParamStore,
        optimizer: Option<AdamP>,
        config: PretrainConfig,
        seed: u64,
        epoch: usize,
    ) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&config.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio {} not in [0, 1]", config.mask_ratio)));
        }
        if let Some(p) = &config.augment {
            p.validate()?;
        }
        let optimizer = match optimizer {
            Some(o) => o,
            None => AdamP::new(config.optimizer.clone())?,
        };
        Ok(Self {
            model,
            store,
            optimizer,
            config,
            seed,
            epoch,
            exec: SparseExec::Compact,
        })
    }

    /// Resumes from a pretraining checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: PretrainConfig, seed: u64) -> Result<Self> {
        let ModelSnapshot::Pretrain(spec) = &ckpt.model else {
            return Err(Error::ConfigMismatch("checkpoint does not hold a pretraining model".into()));
        };
        let (model, mut store) = MimModel::build(spec, seed)?;
        ckpt.restore_into(&mut store, "")?;
        let optimizer = ckpt.restore_optimizer(&store)?;
        Self::assemble(model, store, optimizer, config, seed, ckpt.epoch)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            ModelSnapshot::Pretrain(self.model.spec().clone()),
            &self.store,
            Some(&self.optimizer),
            self.epoch,
            self.seed,
        )
    }

    /// Runs one epoch over `data` (`[C, H, W]` images); returns the epoch
    /// record and the loss of every step.
    pub fn train_epoch(&mut self, data: &[Tensor]) -> Result<(EpochRecord, Vec<f64>)> {
        let (h, w) = check_images(data)?;
        let started = Instant::now();
        let epoch = self.epoch;
        let order = epoch_order(data.len(), self.seed, epoch);
        let per_epoch = steps_per_epoch(data.len(), self.config.batch_size);
        let total = per_epoch * self.config.epochs as u64;
        let (rows, cols) = (h / DOWNSAMPLE_RATIO, w / DOWNSAMPLE_RATIO);
        let mask_seed = self.config.mask_seed.unwrap_or(self.seed);
        let mut losses = Vec::with_capacity(per_epoch as usize);
        for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
            let images = batch
                .iter()
                .map(|&i| prepare(&data[i], self.config.augment.as_ref(), self.seed, epoch, i))
                .collect::<Result<Vec<_>>>()?;
            let grids = batch
                .iter()
                .map(|&i| {
                    let s = derive_seed(mask_seed, &[SALT_MASK, epoch as u64, i as u64]);
                    sample_mask(rows, cols, self.config.mask_ratio, s)
                })
                .collect::<Result<Vec<_>>>()?;
            let masks = mask_levels(&grids, h, w)?;
            let x = Tensor::stack(&images)?;
            let session_seed = derive_seed(self.seed, &[SALT_DROPOUT, epoch as u64, b as u64]);
            let (loss, grads, updates) = {
                let mut s = Session::new(&self.store, Mode::Train, session_seed);
                let (loss, _) = self.model.masked_loss(&mut s, &x, &x, &masks, self.exec)?;
                let value = s.value(loss).item()?;
                let mut g = s.backward(loss)?;
                (value, s.param_grads(&mut g), s.take_updates())
            };
            let lr = self
                .config
                .schedule
                .lr(self.config.optimizer.lr, self.optimizer.steps(), total);
            apply_step(&mut self.store, &mut self.optimizer, grads, updates, lr)?;
            losses.push(loss);
        }
        self.epoch += 1;
        let record = EpochRecord {
            epoch: self.epoch,
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        Ok((record, losses))
    }
}

/// Pretrains a fresh model for `config.epochs` epochs.
pub fn pretrain(spec: &ModelSpec, data: &[Tensor], config: &PretrainConfig, seed: u64) -> Result<(Pretrainer, TrainReport)> {
    check_images(data)?;
    let mut trainer = Pretrainer::new(spec, config.clone(), seed)?;
    let mut report = TrainReport::default();
    for _ in 0..config.epochs {
        let (record, losses) = trainer.train_epoch(data)?;
        report.epochs.push(record);
        report.step_losses.extend(losses);
    }
    Ok((trainer, report))
}

/// Supervised fine-tuning state.
pub struct Finetuner {
    pub classifier: Classifier,
    pub store: ParamStore,
    pub optimizer: AdamP,
    pub config: FinetuneConfig,
    pub seed: u64,
    pub epoch: usize,
}

impl Finetuner {
    /// Builds a classifier on `encoder`; with `pretrained`, its encoder
    /// weights are loaded (any decoder state is ignored).
    pub fn new(
        encoder: &EncoderConfig,
        pretrained: Option<&Checkpoint>,
        config: FinetuneConfig,
        seed: u64,
    ) -> Result<Self> {
        let spec = ClassifierSpec {
            encoder: encoder.clone(),
            num_classes: config.num_classes,
            head_dropout: config.head_dropout,
        };
        let (classifier, mut store) = Classifier::build(&spec, seed)?;
        if let Some(ckpt) = pretrained {
            if ckpt.model.encoder() != encoder {
                return Err(Error::ConfigMismatch(
                    "checkpoint encoder configuration differs from the run configuration".into(),
                ));
            }
            ckpt.restore_into(&mut store, &format!("{ENCODER_PREFIX}."))?;
        }
        Self::assemble(classifier, store, None, config, seed, 0)
    }

    fn assemble(
        classifier: Classifier,
        store: ParamStore,
        optimizer: Option<AdamP>,
        config: FinetuneConfig,
        seed: u64,
        epoch: usize,
    ) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if let Some(p) = &config.augment {
            p.validate()?;
        }
        let optimizer = match optimizer {
            Some(o) => o,
            None => AdamP::new(config.optimizer.clone())?,
        };
        Ok(Self {
            classifier,
            store,
            optimizer,
            config,
            seed,
            epoch,
        })
    }

    /// Resumes from a classifier checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: FinetuneConfig, seed: u64) -> Result<Self> {
        let ModelSnapshot::Classifier(spec) = &ckpt.model else {
            return Err(Error::ConfigMismatch("checkpoint does not hold a classifier".into()));
        };
        if spec.num_classes != config.num_classes {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint has {} classes, configuration {}",
                spec.num_classes, config.num_classes
            )));
        }
        let (classifier, mut store) = Classifier::build(spec, seed)?;
        ckpt.restore_into(&mut store, "")?;
        let optimizer = ckpt.restore_optimizer(&store)?;
        Self::assemble(classifier, store, optimizer, config, seed, ckpt.epoch)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            ModelSnapshot::Classifier(self.classifier.spec().clone()),
            &self.store,
            Some(&self.optimizer),
            self.epoch,
            self.seed,
        )
    }

    pub fn train_epoch(&mut self, images: &[Tensor], labels: &[usize]) -> Result<(EpochRecord, Vec<f64>)> {
        check_images(images)?;
        if labels.len() != images.len() {
            return Err(Error::Argument(format!(
                "{} labels for {} images",
                labels.len(),
                images.len()
            )));
        }
        let k = self.classifier.num_classes();
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Config(format!("label {bad} out of range for {k} classes")));
        }
        let started = Instant::now();
        let epoch = self.epoch;
        let order = epoch_order(images.len(), self.seed, epoch);
        let per_epoch = steps_per_epoch(images.len(), self.config.batch_size);
        let total = per_epoch * self.config.epochs as u64;
        let frozen = self.config.freeze_encoder;
        let mut losses = Vec::with_capacity(per_epoch as usize);
        for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
            let xs = batch
                .iter()
                .map(|&i| prepare(&images[i], self.config.augment.as_ref(), self.seed, epoch, i))
                .collect::<Result<Vec<_>>>()?;
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let x = Tensor::stack(&xs)?;
            let session_seed = derive_seed(self.seed, &[SALT_DROPOUT, epoch as u64, b as u64]);
            let (loss, grads, updates) = {
                let mut s = Session::new(&self.store, Mode::Train, session_seed);
                let encoder_mode = if frozen {
                    s.freeze_prefix(format!("{ENCODER_PREFIX}."));
                    Some(Mode::Eval)
                } else {
                    None
                };
                let xv = s.input(x);
                let out = self.classifier.forward(&mut s, xv, encoder_mode)?;
                let loss = s.graph.cross_entropy(out.logits, &ys)?;
                let value = s.value(loss).item()?;
                let mut g = s.backward(loss)?;
                (value, s.param_grads(&mut g), s.take_updates())
            };
            let lr = self
                .config
                .schedule
                .lr(self.config.optimizer.lr, self.optimizer.steps(), total);
            apply_step(&mut self.store, &mut self.optimizer, grads, updates, lr)?;
            losses.push(loss);
        }
        self.epoch += 1;
        let record = EpochRecord {
            epoch: self.epoch,
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        Ok((record, losses))
    }

    pub fn predict_proba(&self, images: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        self.classifier
            .predict_proba(&self.store, images, self.config.batch_size)
    }
}

/// Fine-tunes for `config.epochs` epochs from `pretrained` or from scratch.
pub fn finetune(
    encoder: &EncoderConfig,
    pretrained: Option<&Checkpoint>,
    images: &[Tensor],
    labels: &[usize],
    config: &FinetuneConfig,
    seed: u64,
) -> Result<(Finetuner, TrainReport)> {
    let mut trainer = Finetuner::new(encoder, pretrained, config.clone(), seed)?;
    let mut report = TrainReport::default();
    for _ in 0..config.epochs {
        let (record, losses) = trainer.train_epoch(images, labels)?;
        report.epochs.push(record);
        report.step_losses.extend(losses);
    }
    Ok((trainer, report))
}
