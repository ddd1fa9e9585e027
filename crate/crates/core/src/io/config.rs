use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::augment::GeometricOp;
use crate::detector::{ModelConfig, Toggles};
use crate::error::{Error, Result};

use super::synth::SyntheticSpec;

/// Parsed `key = value` file. Keys are stored as `section.key`, or bare
/// when they precede any `[section]` header.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    pub source: String,
    entries: BTreeMap<String, (String, usize)>,
}

pub fn parse_config(text: &str, source: &str) -> Result<ConfigFile> {
    let mut section = String::new();
    let mut entries = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split(['#', ';']).next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            msg,
        };
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| err(format!("unterminated section header `{line}`")))?;
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(err("empty key".into()));
        }
        let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
        entries.insert(key, (v.trim().to_string(), i + 1));
    }
    Ok(ConfigFile {
        source: source.to_string(),
        entries,
    })
}

pub fn load_config(path: &Path) -> Result<ConfigFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, &path.display().to_string())
}

impl ConfigFile {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    /// Entries of `section` as `(key, value, line)`.
    pub fn section(&self, section: &str) -> Vec<(&str, &str, usize)> {
        let prefix = format!("{section}.");
        self.entries
            .iter()
            .filter_map(|(k, (v, l))| k.strip_prefix(&prefix).map(|k| (k, v.as_str(), *l)))
            .collect()
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), (value.to_string(), 0));
    }

    fn err(&self, line: usize, msg: String) -> Error {
        Error::Parse {
            path: self.source.clone(),
            line,
            msg,
        }
    }
}

fn num<T: std::str::FromStr>(conf: &ConfigFile, key: &str, v: &str, line: usize) -> Result<T> {
    v.parse().map_err(|_| conf.err(line, format!("`{key}`: cannot parse `{v}`")))
}

fn flag(conf: &ConfigFile, key: &str, v: &str, line: usize) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(conf.err(line, format!("`{key}`: expected a boolean, found `{v}`"))),
    }
}

fn list<T: std::str::FromStr>(conf: &ConfigFile, key: &str, v: &str, line: usize) -> Result<Vec<T>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| num(conf, key, s.trim(), line)).collect()
}

/// Applies the `[model]`, `[train]`, `[loss]`, `[toggles]`, `[augment]` and
/// `[eval]` sections. Unknown keys inside those sections are errors; other
/// sections are left to the caller.
pub fn apply_model_config(cfg: &mut ModelConfig, conf: &ConfigFile) -> Result<()> {
    for sec in ["model", "train", "loss", "toggles", "augment", "eval"] {
        for (k, v, line) in conf.section(sec) {
            match (sec, k) {
                ("model", "input_size") => cfg.input_size = num(conf, k, v, line)?,
                ("model", "stage_widths") => cfg.stage_widths = list(conf, k, v, line)?,
                ("model", "channels") => cfg.channels = num(conf, k, v, line)?,
                ("model", "levels") => cfg.levels = num(conf, k, v, line)?,
                ("model", "num_classes") => cfg.num_classes = num(conf, k, v, line)?,
                ("model", "disc_hidden") => cfg.disc_hidden = num(conf, k, v, line)?,
                ("model" | "train", "seed") => cfg.seed = num(conf, k, v, line)?,
                ("train", "lr") => cfg.lr = num(conf, k, v, line)?,
                ("train", "lr_final") => cfg.lr_final = num(conf, k, v, line)?,
                ("train", "momentum") => cfg.momentum = num(conf, k, v, line)?,
                ("train", "max_grad_norm") => cfg.max_grad_norm = num(conf, k, v, line)?,
                ("train", "batch_size") => cfg.batch_size = num(conf, k, v, line)?,
                ("train", "epochs") => cfg.epochs = num(conf, k, v, line)?,
                ("train", "eval_every") => cfg.eval_every = num(conf, k, v, line)?,
                ("loss", "lambda_x") => cfg.loss.lambda_x = num(conf, k, v, line)?,
                ("loss", "lambda_c") => cfg.loss.lambda_c = num(conf, k, v, line)?,
                ("loss", "lambda_l1") => cfg.loss.lambda_l1 = num(conf, k, v, line)?,
                ("loss", "size_weight") => cfg.size_weight = num(conf, k, v, line)?,
                ("loss", "class_weight") => cfg.class_weight = num(conf, k, v, line)?,
                ("loss", "objectness_weight") => cfg.objectness_weight = num(conf, k, v, line)?,
                ("loss", "adversarial_weight") => cfg.adversarial_weight = num(conf, k, v, line)?,
                ("toggles", "variant") => {
                    cfg.toggles = Toggles::variant(v).map_err(|e| conf.err(line, e.to_string()))?
                }
                ("toggles", "caa") => cfg.toggles.caa = flag(conf, k, v, line)?,
                ("toggles", "rfaconv") => cfg.toggles.rfaconv = flag(conf, k, v, line)?,
                ("toggles", "bifpn") => cfg.toggles.bifpn = flag(conf, k, v, line)?,
                ("toggles", "acmix") => cfg.toggles.acmix = flag(conf, k, v, line)?,
                ("toggles", "self_attention") => cfg.toggles.self_attention = flag(conf, k, v, line)?,
                ("augment", "multiplier") => cfg.augment.multiplier = num(conf, k, v, line)?,
                ("augment", "strength") => cfg.augment.strength = num(conf, k, v, line)?,
                ("augment", "beta_param") => cfg.augment.beta_param = num(conf, k, v, line)?,
                ("augment", "geometric") => {
                    cfg.augment.geometric = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(GeometricOp::parse)
                        .collect::<Result<_>>()
                        .map_err(|e| conf.err(line, e.to_string()))?
                }
                ("eval", "conf_threshold") => cfg.conf_threshold = num(conf, k, v, line)?,
                ("eval", "eval_conf_threshold") => cfg.eval_conf_threshold = num(conf, k, v, line)?,
                ("eval", "nms_iou") => cfg.nms_iou = num(conf, k, v, line)?,
                ("eval", "max_detections") => cfg.max_detections = num(conf, k, v, line)?,
                _ => return Err(conf.err(line, format!("unknown key `{k}` in [{sec}]"))),
            }
        }
    }
    cfg.validate()
}

/// Applies the `[synth]` section.
pub fn apply_synth_config(spec: &mut SyntheticSpec, conf: &ConfigFile) -> Result<()> {
    for (k, v, line) in conf.section("synth") {
        match k {
            "image_size" => spec.image_size = num(conf, k, v, line)?,
            "num_classes" => spec.num_classes = num(conf, k, v, line)?,
            "objects_min" => spec.objects_per_image.0 = num(conf, k, v, line)?,
            "objects_max" => spec.objects_per_image.1 = num(conf, k, v, line)?,
            "size_min" => spec.object_size.0 = num(conf, k, v, line)?,
            "size_max" => spec.object_size.1 = num(conf, k, v, line)?,
            "imbalance_ratio" => spec.imbalance_ratio = num(conf, k, v, line)?,
            "val_imbalance_ratio" => spec.val_imbalance_ratio = Some(num(conf, k, v, line)?),
            "train_images" => spec.train_images = num(conf, k, v, line)?,
            "val_images" => spec.val_images = num(conf, k, v, line)?,
            "seed" => spec.seed = num(conf, k, v, line)?,
            _ => return Err(conf.err(line, format!("unknown key `{k}` in [synth]"))),
        }
    }
    spec.validate()
}
