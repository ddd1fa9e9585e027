use std::io::Write;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::evaluate_model;
use super::head::assign_targets;
use super::model::Detector;
use crate::augment::{build_augmented_set, compute_class_frequencies};
use crate::data::AnnotatedImage;
use crate::error::{Error, Result};
use crate::rfafpn::{bce, composite_loss, confidence_loss, coordinate_loss, sparsity_loss, CellAssignment};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

/// Stream indices for the per-epoch shuffling and augmentation generators.
const SHUFFLE_STREAM: u64 = 1 << 40;
const AUGMENT_STREAM: u64 = 2 << 40;

/// SGD with classical momentum: `v ← μ·v + g`, `p ← p − lr·v`.
///
/// When `max_grad_norm` is positive the gradient is rescaled so that its
/// global L2 norm does not exceed it.
#[derive(Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub max_grad_norm: f64,
    params: Vec<Tensor>,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: Vec<Tensor>, momentum: f64) -> Self {
        let velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            momentum,
            max_grad_norm: 0.0,
            params,
            velocity,
        }
    }

    pub fn with_max_grad_norm(mut self, max_norm: f64) -> Self {
        self.max_grad_norm = max_norm;
        self
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad())
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    pub fn step(&mut self, lr: f64) {
        let mut factor = 1.0;
        if self.max_grad_norm > 0.0 {
            let norm = self.grad_norm();
            if norm > self.max_grad_norm {
                factor = self.max_grad_norm / norm;
            }
        }
        for (p, v) in self.params.iter().zip(&mut self.velocity) {
            let Some(g) = p.grad() else { continue };
            for (vi, gi) in v.iter_mut().zip(&g) {
                *vi = self.momentum * *vi + factor * gi;
            }
            p.update_data(|d| {
                for (di, vi) in d.iter_mut().zip(v.iter()) {
                    *di -= lr * vi;
                }
            });
        }
    }
}

/// Cosine decay from `lr0` at step 0 to `lr1` at `total`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64, lr1: f64) -> f64 {
    if total <= 1 {
        return lr0;
    }
    let t = (step as f64 / (total - 1) as f64).min(1.0);
    lr1 + 0.5 * (lr0 - lr1) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Loss terms of one sample. `total` carries the graph; the rest are values.
#[derive(Debug)]
pub struct SampleLoss {
    pub total: Tensor,
    pub l_x: f64,
    pub l_c: f64,
    pub l_l1: f64,
    pub size: f64,
    pub class: f64,
    pub objectness: f64,
    pub g_loss: f64,
    /// Discriminator loss on detached inputs, when the fusion block is active.
    pub d_loss: Option<Tensor>,
}

/// Composite loss plus the size, class and adversarial generator terms.
pub fn sample_loss(model: &Detector, sample: &AnnotatedImage) -> Result<SampleLoss> {
    let cfg = &model.cfg;
    let s = cfg.input_size;
    if sample.width() != s || sample.height() != s {
        return Err(Error::Data(format!(
            "image {} is {}x{}, model expects {s}x{s}",
            sample.id,
            sample.width(),
            sample.height()
        )));
    }
    let pass = model.forward_with(&sample.image.to_signed_tensor(), true)?;
    let nc = cfg.num_classes;
    let grid = cfg.grid();
    let n = grid * grid;
    let raw = &pass.raw;

    let targets = assign_targets(&sample.labels, grid);
    let mut mask = vec![0.0; n];
    let offsets: Vec<[f64; 2]> = (0..n).map(|i| [(i % grid) as f64, (i / grid) as f64]).collect();
    let mut centers: Vec<[f64; 2]> = offsets.iter().map(|o| [o[0] + 0.5, o[1] + 0.5]).collect();
    for t in &targets {
        mask[t.cell(grid)] = 1.0;
        centers[t.cell(grid)] = t.center;
    }
    let confidence = raw.narrow(0, 1)?.sigmoid().reshape(&[n])?;
    let predicted = raw.narrow(1 + nc, 2)?.sigmoid().t()?;
    let assignment = CellAssignment::new(mask, predicted, offsets, centers, confidence)?;
    let lx = coordinate_loss(&assignment)?;
    let lc = confidence_loss(&assignment)?;
    let ll1 = if cfg.toggles.bifpn {
        sparsity_loss(&model.bifpn.basis_weights())?
    } else {
        Tensor::scalar(0.0)
    };
    let mut total = composite_loss(&lx, &lc, &ll1, &cfg.loss)?;

    let (mut size, mut class, mut objectness) = (0.0, 0.0, 0.0);
    if !targets.is_empty() {
        let sizes = raw.narrow(1 + nc + 2, 2)?;
        let idx: Vec<usize> = targets.iter().flat_map(|t| [t.cell(grid), n + t.cell(grid)]).collect();
        let want: Vec<f64> = targets.iter().flat_map(|t| t.log_size).collect();
        let size_loss = sizes
            .gather(&idx)?
            .sub(&Tensor::from_vec(&[want.len()], want)?)?
            .abs()
            .sum();
        let logits = raw.narrow(1, nc)?;
        let idx: Vec<usize> = targets.iter().flat_map(|t| (0..nc).map(move |c| c * n + t.cell(grid))).collect();
        let onehot: Vec<f64> = targets
            .iter()
            .flat_map(|t| (0..nc).map(move |c| if c == t.class_id { 1.0 } else { 0.0 }))
            .collect();
        let class_loss = bce(&logits.gather(&idx)?.sigmoid(), &onehot)?;
        let positives = assignment.mask.iter().sum::<f64>();
        let obj_loss = bce(&assignment.confidence, &assignment.mask)?.scale(n as f64 / positives);
        size = size_loss.item();
        class = class_loss.item();
        objectness = obj_loss.item();
        total = total
            .add(&size_loss.scale(cfg.size_weight))?
            .add(&class_loss.scale(cfg.class_weight))?
            .add(&obj_loss.scale(cfg.objectness_weight))?;
    }
    let mut g_loss = 0.0;
    if let Some(g) = &pass.g_loss {
        g_loss = g.item();
        total = total.add(&g.scale(cfg.adversarial_weight))?;
    }
    Ok(SampleLoss {
        l_x: lx.item(),
        l_c: lc.item(),
        l_l1: ll1.item(),
        size,
        class,
        objectness,
        g_loss,
        d_loss: pass.d_loss,
        total,
    })
}

/// Per-epoch means over the samples seen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub samples: usize,
    pub loss: f64,
    pub l_x: f64,
    pub l_c: f64,
    pub l_l1: f64,
    pub size: f64,
    pub class: f64,
    pub objectness: f64,
    pub g_loss: f64,
    pub d_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_map50: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_map50_95: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Detector,
    pub log: Vec<EpochLog>,
}

pub fn train(
    train_set: &[AnnotatedImage],
    val: Option<&[AnnotatedImage]>,
    cfg: &ModelConfig,
    log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    train_model(Detector::new(cfg)?, train_set, val, log_sink)
}

/// Mini-batch training. Each batch takes one generator step on the summed
/// per-sample losses (scaled by `1/B`), then one discriminator step on the
/// same samples' detached features.
pub fn train_model(
    model: Detector,
    train_set: &[AnnotatedImage],
    val: Option<&[AnnotatedImage]>,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    let cfg = model.cfg.clone();
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let table = if cfg.toggles.acmix {
        Some(compute_class_frequencies(train_set)?)
    } else {
        None
    };
    let per_epoch = if table.is_some() {
        cfg.augment.multiplier.max(1) * train_set.len()
    } else {
        train_set.len()
    };
    let batches = per_epoch.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches;
    let base = RandomSource::new(cfg.seed);
    let mut gen_opt = Sgd::new(model.generator_params(), cfg.momentum).with_max_grad_norm(cfg.max_grad_norm);
    let mut disc_opt = Sgd::new(model.disc_params(), cfg.momentum).with_max_grad_norm(cfg.max_grad_norm);
    let mut log = Vec::new();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let augmented;
        let data: &[AnnotatedImage] = match &table {
            Some(t) => {
                let rng = base.derive(AUGMENT_STREAM + epoch as u64);
                augmented = build_augmented_set(train_set, t, &cfg.augment, &rng)?.images;
                &augmented
            }
            None => train_set,
        };
        let mut order: Vec<usize> = (0..data.len()).collect();
        base.derive(SHUFFLE_STREAM + epoch as u64).shuffle(&mut order);

        let mut sums = [0.0f64; 9];
        let mut lr = cfg.lr;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            lr = cosine_lr(step, total_steps, cfg.lr, cfg.lr_final);
            let scale = 1.0 / chunk.len() as f64;
            gen_opt.zero_grad();
            let mut d_losses = Vec::new();
            for &i in chunk {
                let l = sample_loss(&model, &data[i])?;
                let total = l.total.item();
                let d = l.d_loss.as_ref().map(|d| d.item()).unwrap_or(0.0);
                if !total.is_finite() || !d.is_finite() {
                    return Err(Error::Diverged { epoch, batch: b });
                }
                l.total.scale(scale).backward()?;
                for (acc, v) in sums.iter_mut().zip([total, l.l_x, l.l_c, l.l_l1, l.size, l.class, l.objectness, l.g_loss, d]) {
                    *acc += v;
                }
                d_losses.extend(l.d_loss);
            }
            gen_opt.step(lr);
            disc_opt.zero_grad();
            if !d_losses.is_empty() {
                for d in &d_losses {
                    d.scale(scale).backward()?;
                }
                disc_opt.step(lr);
            }
            step += 1;
        }
        let m = data.len() as f64;
        let mut entry = EpochLog {
            epoch,
            lr,
            samples: data.len(),
            loss: sums[0] / m,
            l_x: sums[1] / m,
            l_c: sums[2] / m,
            l_l1: sums[3] / m,
            size: sums[4] / m,
            class: sums[5] / m,
            objectness: sums[6] / m,
            g_loss: sums[7] / m,
            d_loss: sums[8] / m,
            val_map50: None,
            val_map50_95: None,
        };
        let last = epoch + 1 == cfg.epochs;
        if let Some(v) = val {
            if cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || last) {
                let r = evaluate_model(&model, v)?;
                entry.val_map50 = Some(r.map50);
                entry.val_map50_95 = Some(r.map50_95);
            }
        }
        if let Some(w) = log_sink.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io("<training log>", e))?;
        }
        log.push(entry);
    }
    Ok(TrainOutcome { model, log })
}
