use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::rfafpn::LossWeights;

/// Module switches used by the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    pub caa: bool,
    pub rfaconv: bool,
    pub bifpn: bool,
    pub acmix: bool,
    pub self_attention: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::FULL
    }
}

impl Toggles {
    pub const FULL: Toggles = Toggles {
        caa: true,
        rfaconv: true,
        bifpn: true,
        acmix: true,
        self_attention: true,
    };

    /// Ablation variant names, full model first.
    pub const VARIANTS: [&'static str; 7] = [
        "full",
        "no-rfaconv",
        "no-bifpn",
        "no-self-attention",
        "no-rfafpn",
        "no-caa",
        "no-acmix",
    ];

    pub fn variant(name: &str) -> Result<Self> {
        let f = Self::FULL;
        Ok(match name {
            "full" => f,
            "no-rfaconv" => Self { rfaconv: false, ..f },
            "no-bifpn" => Self { bifpn: false, ..f },
            "no-self-attention" => Self { self_attention: false, ..f },
            "no-rfafpn" => Self {
                rfaconv: false,
                bifpn: false,
                ..f
            },
            "no-caa" => Self { caa: false, ..f },
            "no-acmix" => Self { acmix: false, ..f },
            other => {
                return Err(Error::invalid(
                    "toggles",
                    format!("unknown variant `{other}`; expected one of {}", Self::VARIANTS.join(", ")),
                ))
            }
        })
    }

    /// The adversarial coupling runs whenever the fusion block is present.
    pub fn adversarial(&self) -> bool {
        self.rfaconv || self.bifpn
    }

    /// Self-attention only exists inside the attention block.
    pub fn attention_core(&self) -> bool {
        self.caa && self.self_attention
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    /// Stem width followed by one width per pyramid stage.
    pub stage_widths: Vec<usize>,
    /// Common pyramid channel width after lateral projection.
    pub channels: usize,
    pub levels: usize,
    pub num_classes: usize,
    pub lr: f64,
    pub lr_final: f64,
    pub momentum: f64,
    /// Global gradient-norm ceiling per step; zero disables clipping.
    pub max_grad_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub toggles: Toggles,
    pub loss: LossWeights,
    /// Weight of the log-size L1 term on assigned cells.
    pub size_weight: f64,
    /// Weight of the class BCE term on assigned cells.
    pub class_weight: f64,
    /// Weight of the objectness BCE summed over all cells and divided by the
    /// number of assigned cells.
    pub objectness_weight: f64,
    pub adversarial_weight: f64,
    pub disc_hidden: usize,
    pub augment: AugmentConfig,
    /// Score threshold for precision, recall and the confusion matrix.
    pub conf_threshold: f64,
    /// Score threshold applied before NMS when collecting detections for AP.
    pub eval_conf_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    /// Validate every this many epochs (and after the last); zero disables.
    pub eval_every: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            stage_widths: vec![8, 16, 24, 32],
            channels: 16,
            levels: 3,
            num_classes: 2,
            lr: 0.03,
            lr_final: 0.00001,
            momentum: 0.9,
            max_grad_norm: 5.0,
            batch_size: 8,
            epochs: 30,
            seed: 0,
            toggles: Toggles::FULL,
            loss: LossWeights::default(),
            size_weight: 1.0,
            class_weight: 1.0,
            objectness_weight: 1.0,
            adversarial_weight: 0.01,
            disc_hidden: 8,
            augment: AugmentConfig::default(),
            conf_threshold: 0.25,
            eval_conf_threshold: 0.001,
            nms_iou: 0.5,
            max_detections: 100,
            eval_every: 0,
        }
    }
}

impl ModelConfig {
    /// Published schedule: learning rate 0.001, batch 50, 100 epochs.
    pub fn published() -> Self {
        Self {
            lr: 0.001,
            batch_size: 50,
            epochs: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("model_config", msg));
        if self.levels < 2 {
            return bad(format!("levels = {} (need at least 2)", self.levels));
        }
        if self.stage_widths.len() != self.levels + 1 || self.stage_widths.contains(&0) {
            return bad(format!(
                "stage_widths {:?} must hold {} positive entries",
                self.stage_widths,
                self.levels + 1
            ));
        }
        if self.input_size < 4 << self.levels {
            return bad(format!("input_size {} too small for {} levels", self.input_size, self.levels));
        }
        if self.channels == 0 || self.num_classes == 0 || self.batch_size == 0 || self.disc_hidden == 0 {
            return bad("channels, num_classes, batch_size and disc_hidden must be positive".into());
        }
        for (name, v) in [
            ("lr", self.lr),
            ("lr_final", self.lr_final),
            ("max_grad_norm", self.max_grad_norm),
            ("size_weight", self.size_weight),
            ("class_weight", self.class_weight),
            ("objectness_weight", self.objectness_weight),
            ("adversarial_weight", self.adversarial_weight),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} = {v} must be a non-negative number"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return bad(format!("nms_iou {} outside (0, 1)", self.nms_iou));
        }
        for (name, v) in [("conf_threshold", self.conf_threshold), ("eval_conf_threshold", self.eval_conf_threshold)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// Spatial side of each pyramid level, finest first (strides 4, 8, 16, …).
    pub fn grid_sizes(&self) -> Vec<usize> {
        let mut s = self.input_size.div_ceil(2).div_ceil(2);
        let mut out = vec![s];
        for _ in 1..self.levels {
            s = s.div_ceil(2);
            out.push(s);
        }
        out
    }

    /// Side of the detection grid (the finest level).
    pub fn grid(&self) -> usize {
        self.grid_sizes()[0]
    }

    /// Length of one per-cell prediction vector.
    pub fn prediction_len(&self) -> usize {
        1 + self.num_classes + 4
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_parse() {
        for v in Toggles::VARIANTS {
            Toggles::variant(v).unwrap();
        }
        assert!(Toggles::variant("no-head").is_err());
        let t = Toggles::variant("no-rfafpn").unwrap();
        assert!(!t.adversarial());
        assert!(!Toggles::variant("no-caa").unwrap().attention_core());
    }

    #[test]
    fn grid_sizes_follow_strides() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.grid_sizes(), vec![16, 8, 4]);
        assert_eq!(c.prediction_len(), 7);
        let p = ModelConfig::published();
        assert_eq!((p.batch_size, p.epochs, p.lr), (50, 100, 0.001));
        let bad = ModelConfig {
            stage_widths: vec![8, 16],
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
