//! The run configuration file: TOML with one table per concern. Unknown keys
//! are rejected; every key is optional and falls back to the default shown
//! by `spmim config`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spmim::data::synth::SynthConfig;
use spmim::train::LrSchedule;
use spmim::{AdamPConfig, AugmentPolicy, DecoderConfig, EncoderConfig, FinetuneConfig, ModelSpec, PretrainConfig, QcThresholds};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub masking: MaskingConfig,
    pub optimizer: AdamPConfig,
    pub training: TrainingConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    pub ratio: f64,
    /// Mask sampling seed; `--seed` when unset.
    pub seed: Option<u64>,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self { ratio: 0.6, seed: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub num_classes: usize,
    pub head_dropout: f64,
    pub freeze_encoder: bool,
    /// Apply `data.augment` to training images.
    pub augment: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 10,
            finetune_epochs: 30,
            batch_size: 16,
            schedule: LrSchedule::Cosine,
            num_classes: 2,
            head_dropout: 0.2,
            freeze_encoder: false,
            augment: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Relative paths resolve against the config file's directory.
    pub manifest: Option<PathBuf>,
    /// Images are resized to this square side; must be a multiple of 32.
    pub image_size: usize,
    /// Drop images that fail quality control before training.
    pub qc_filter: bool,
    pub augment: AugmentPolicy,
    pub qc: QcThresholds,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            image_size: 224,
            qc_filter: false,
            augment: AugmentPolicy::default(),
            qc: QcThresholds::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Accuracy,
    WeightedF1,
    Auc,
    Kappa,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub folds: usize,
    pub holdout_ratio: f64,
    pub metrics: Vec<MetricName>,
    /// Encoder scale tapped by `gradcam`.
    pub gradcam_scale: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            holdout_ratio: 0.8,
            metrics: vec![MetricName::Accuracy, MetricName::WeightedF1, MetricName::Auc, MetricName::Kappa],
            gradcam_scale: 5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

impl RunConfig {
    /// Reads and validates a config file, resolving relative paths against
    /// its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.manifest, &mut cfg.output.dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.data.image_size == 0 || self.data.image_size % 32 != 0 {
            return bad(format!("data.image_size must be a positive multiple of 32, got {}", self.data.image_size));
        }
        if !(0.0..=1.0).contains(&self.masking.ratio) {
            return bad(format!("masking.ratio {} not in [0, 1]", self.masking.ratio));
        }
        if self.training.batch_size == 0 {
            return bad("training.batch_size must be positive".into());
        }
        if self.eval.folds < 2 {
            return bad("eval.folds must be at least 2".into());
        }
        if !(1..=5).contains(&self.eval.gradcam_scale) {
            return bad("eval.gradcam_scale must be in 1..=5".into());
        }
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.optimizer.validate()?;
        self.data.augment.validate()?;
        self.data.qc.validate()?;
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec { encoder: self.encoder.clone(), decoder: self.decoder.clone() }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.training.pretrain_epochs,
            batch_size: self.training.batch_size,
            mask_ratio: self.masking.ratio,
            mask_seed: self.masking.seed,
            optimizer: self.optimizer.clone(),
            schedule: self.training.schedule,
            augment: self.training.augment.then(|| self.data.augment.clone()),
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.training.finetune_epochs,
            batch_size: self.training.batch_size,
            num_classes: self.training.num_classes,
            head_dropout: self.training.head_dropout,
            freeze_encoder: self.training.freeze_encoder,
            optimizer: self.optimizer.clone(),
            schedule: self.training.schedule,
            augment: self.training.augment.then(|| self.data.augment.clone()),
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig { size: self.data.image_size, num_classes: self.training.num_classes, ..SynthConfig::default() }
    }
}

/// The default configuration as TOML.
pub fn reference() -> String {
    let body = toml::to_string_pretty(&RunConfig::default()).expect("default config serializes");
    format!(
        "# Default run configuration. Every key is optional.\n\
         # data.manifest and output.dir are unset by default; set them or pass\n\
         # --manifest / --out.\n\n{body}"
    )
}
