//! Masked image modeling for hierarchical convolutional encoders.
//!
//! Images are masked with a coarse random patch grid, encoded by a
//! MobileNetV2-style encoder built from mask-aware convolutions, densified
//! with learned per-scale mask embeddings, decoded by a light UNet-style
//! decoder and scored with an MSE restricted to the masked pixels. The
//! pretrained encoder can then be fine-tuned for classification and
//! inspected with Grad-CAM.

pub mod autograd;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
mod kernels;
pub mod masking;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod sparse;
pub mod tensor;
pub mod train;

pub use autograd::{finite_difference_grad, Gradients, Graph, NormMode, Var};
pub use data::augment::{augment, AugmentPolicy};
pub use data::qc::{quality_check, QcThresholds, QualityReport};
pub use data::split::{holdout_split, stratified_kfold};
pub use data::{load_image, ImageRecord};
pub use decoder::{Decoder, DecoderConfig, DecoderState};
pub use encoder::{build_encoder, Encoder, EncoderConfig, EncoderOutput, StageConfig};
pub use error::{Error, Result};
pub use eval::gradcam::{gradcam, Heatmap};
pub use eval::{
    auc_binary, compute_metrics, cross_validate, quadratic_kappa, CvReport, Metrics, PredictionSet,
};
pub use kernels::ConvSpec;
pub use masking::{
    apply_mask_zero, build_mask_pyramid, sample_mask, MaskGrid, MaskPyramid, SpatialMask,
};
pub use model::{Classifier, ClassifierHead, ClassifierSpec, MimModel, ModelSpec};
pub use nn::{apply_running_updates, Mode, Session};
pub use params::{ParamId, ParamKind, ParamStore};
pub use sparse::SparseExec;
pub use tensor::Tensor;
pub use train::adamp::{AdamP, AdamPConfig};
pub use train::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ModelSnapshot};
pub use train::{
    finetune, masked_mse_loss, pretrain, EpochRecord, FinetuneConfig, Finetuner, PretrainConfig,
    Pretrainer, TrainReport,
};
