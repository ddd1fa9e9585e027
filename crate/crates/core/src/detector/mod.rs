//! Backbone stub, fusion block, attention, detection head, decoding, NMS,
//! training loop, FLOP accounting and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod flops;
pub mod head;
pub mod model;
pub mod nms;
pub mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, NamedTensor};
pub use config::{ModelConfig, Toggles};
pub use flops::{affine_macs, attention_macs, conv_macs, count_flops, FlopReport, ModuleFlops, VariantFlops};
pub use head::{assign_targets, decode_predictions, encode_target, head_forward, CellTarget, Head};
pub use model::{backbone_forward, Backbone, Detector, ForwardPass};
pub use nms::{nms, nms_indices};
pub use train::{cosine_lr, sample_loss, train, train_model, EpochLog, SampleLoss, Sgd, TrainOutcome};

pub use crate::metrics::Detection;

use std::path::Path;

use crate::data::AnnotatedImage;
use crate::error::Result;
use crate::metrics::{evaluate, EvalReport, EvalSettings, ImageResult};

/// Runs the model over `images` and scores it. AP uses detections down to
/// `eval_conf_threshold`; precision, recall and the confusion matrix use
/// `conf_threshold`.
pub fn evaluate_model(model: &Detector, images: &[AnnotatedImage]) -> Result<EvalReport> {
    let results = predict_all(model, images)?;
    let cfg = &model.cfg;
    let mut report = evaluate(
        &results,
        &EvalSettings {
            num_classes: cfg.num_classes,
            conf_threshold: cfg.conf_threshold,
            iou_threshold: 0.5,
        },
    )?;
    report.flops = Some(count_flops(cfg)?.total_flops);
    Ok(report)
}

pub fn predict_all(model: &Detector, images: &[AnnotatedImage]) -> Result<Vec<ImageResult>> {
    images
        .iter()
        .map(|im| {
            Ok(ImageResult {
                detections: model.predict(&im.image.to_signed_tensor(), model.cfg.eval_conf_threshold)?,
                truths: im.truths(),
            })
        })
        .collect()
}

impl Detector {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.named_params())
    }

    /// Builds a model for `cfg` and fills it from a checkpoint file.
    pub fn load(path: &Path, cfg: &ModelConfig) -> Result<Self> {
        let model = Detector::new(cfg)?;
        model.load_params(&load_checkpoint(path)?)?;
        Ok(model)
    }
}
