//! Detection scoring: IoU, greedy matching, precision/recall/F1, 101-point
//! interpolated AP, mAP over IoU thresholds and confusion matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in absolute pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x2 <= self.x1 || self.y2 <= self.y1 {
            return Err(Error::invalid("bbox", format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x1: cx - w / 2.0,
            y1: cy - h / 2.0,
            x2: cx + w / 2.0,
            y2: cy + h / 2.0,
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn intersection(&self, o: &BBox) -> f64 {
        let w = self.x2.min(o.x2) - self.x1.max(o.x1);
        let h = self.y2.min(o.y2) - self.y1.max(o.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// IoU without validation; zero when the union is empty.
    pub fn iou(&self, o: &BBox) -> f64 {
        let inter = self.intersection(o);
        let union = self.area() + o.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(a.iou(b))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class_id: usize,
    pub bbox: BBox,
}

/// Detections and ground truth for one image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub detections: Vec<Detection>,
    pub truths: Vec<GroundTruth>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Per detection, in the caller's order: matched truth index if a true positive.
    pub detection_match: Vec<Option<usize>>,
    pub truth_matched: Vec<bool>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl MatchResult {
    pub fn is_tp(&self, det: usize) -> bool {
        self.detection_match[det].is_some()
    }
}

/// Indices of `dets` ordered by descending score; ties keep input order.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

fn best_unmatched(det: &Detection, truths: &[GroundTruth], taken: &[bool], thr: f64, same_class: bool) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, t) in truths.iter().enumerate() {
        if taken[j] || (same_class && t.class_id != det.class_id) {
            continue;
        }
        let v = det.bbox.iou(&t.bbox);
        if v >= thr && best.is_none_or(|(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    best.map(|(j, _)| j)
}

/// Greedy same-class matching in descending score order.
pub fn match_detections(dets: &[Detection], truths: &[GroundTruth], iou_threshold: f64) -> MatchResult {
    let mut taken = vec![false; truths.len()];
    let mut detection_match = vec![None; dets.len()];
    for i in score_order(dets) {
        if let Some(j) = best_unmatched(&dets[i], truths, &taken, iou_threshold, true) {
            taken[j] = true;
            detection_match[i] = Some(j);
        }
    }
    let tp = detection_match.iter().filter(|m| m.is_some()).count();
    MatchResult {
        tp,
        fp: dets.len() - tp,
        fn_: truths.len() - tp,
        detection_match,
        truth_matched: taken,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    /// No detections: precision reported as 0.
    pub precision_undefined: bool,
    /// No ground truth: recall reported as 0.
    pub recall_undefined: bool,
}

pub fn precision_recall_counts(tp: usize, fp: usize, fn_: usize) -> PrecisionRecall {
    let (precision, precision_undefined) = if tp + fp == 0 {
        (0.0, true)
    } else {
        (tp as f64 / (tp + fp) as f64, false)
    };
    let (recall, recall_undefined) = if tp + fn_ == 0 {
        (0.0, true)
    } else {
        (tp as f64 / (tp + fn_) as f64, false)
    };
    PrecisionRecall {
        precision,
        recall,
        precision_undefined,
        recall_undefined,
    }
}

pub fn precision_recall(m: &MatchResult) -> PrecisionRecall {
    precision_recall_counts(m.tp, m.fp, m.fn_)
}

/// Harmonic mean of precision and recall; zero when both are zero.
pub fn f1(p: f64, r: f64) -> f64 {
    if p + r <= 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Number of interpolation points used by [`interpolated_ap`].
pub const RECALL_POINTS: usize = 101;

/// 101-point interpolated AP from ranked true-positive flags.
pub fn interpolated_ap(tp_flags: &[bool], n_truths: usize) -> f64 {
    if n_truths == 0 || tp_flags.is_empty() {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp_flags.len());
    let mut rec = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (k, &hit) in tp_flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        prec.push(tp as f64 / (k + 1) as f64);
        rec.push(tp as f64 / n_truths as f64);
    }
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for i in 0..RECALL_POINTS {
        let r = i as f64 / (RECALL_POINTS - 1) as f64;
        while k < rec.len() && rec[k] < r - 1e-12 {
            k += 1;
        }
        if k == rec.len() {
            break;
        }
        sum += prec[k];
    }
    sum / RECALL_POINTS as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    /// No ground truth of this class: AP reported as 0.
    pub no_truths: bool,
}

/// AP of one class over a set of images. Detections of every image are
/// ranked jointly by score; ties are broken by image then input order.
pub fn class_average_precision(images: &[ImageResult], class_id: usize, iou_threshold: f64) -> ApResult {
    let mut ranked: Vec<(usize, usize)> = Vec::new();
    let mut n_truths = 0;
    for (im, r) in images.iter().enumerate() {
        n_truths += r.truths.iter().filter(|t| t.class_id == class_id).count();
        ranked.extend(
            r.detections
                .iter()
                .enumerate()
                .filter(|(_, d)| d.class_id == class_id)
                .map(|(i, _)| (im, i)),
        );
    }
    ranked.sort_by(|&(ia, a), &(ib, b)| {
        images[ib].detections[b]
            .score
            .total_cmp(&images[ia].detections[a].score)
    });
    let mut taken: Vec<Vec<bool>> = images.iter().map(|r| vec![false; r.truths.len()]).collect();
    let flags: Vec<bool> = ranked
        .iter()
        .map(|&(im, i)| {
            let d = &images[im].detections[i];
            match best_unmatched(d, &images[im].truths, &taken[im], iou_threshold, true) {
                Some(j) => {
                    taken[im][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    ApResult {
        ap: interpolated_ap(&flags, n_truths),
        no_truths: n_truths == 0,
    }
}

/// Single-image, single-class AP.
pub fn average_precision(dets: &[Detection], truths: &[GroundTruth], iou_threshold: f64) -> ApResult {
    let Some(class_id) = dets.first().map(|d| d.class_id).or(truths.first().map(|t| t.class_id)) else {
        return ApResult { ap: 0.0, no_truths: true };
    };
    let image = ImageResult {
        detections: dets.to_vec(),
        truths: truths.to_vec(),
    };
    class_average_precision(std::slice::from_ref(&image), class_id, iou_threshold)
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub map50: f64,
    pub map50_95: f64,
    pub thresholds: Vec<f64>,
    /// `[class][threshold]`
    pub per_class: Vec<Vec<f64>>,
    /// Classes with ground truth; only these enter the mean.
    pub evaluated_classes: Vec<usize>,
}

/// Mean AP over classes that have ground truth, at each of `thresholds`.
/// `map50` uses 0.5 and `map50_95` averages over all given thresholds.
pub fn map_at(images: &[ImageResult], num_classes: usize, thresholds: &[f64]) -> Result<MapResult> {
    if thresholds.is_empty() {
        return Err(Error::invalid("map_at", "no thresholds"));
    }
    if let Some(t) = thresholds.iter().find(|t| !(0.5 - 1e-12..=0.95 + 1e-12).contains(*t)) {
        return Err(Error::invalid("map_at", format!("threshold {t} outside [0.5, 0.95]")));
    }
    let mut per_class = vec![vec![0.0; thresholds.len()]; num_classes];
    let mut evaluated = Vec::new();
    for (c, row) in per_class.iter_mut().enumerate() {
        let mut any = false;
        for (k, &t) in thresholds.iter().enumerate() {
            let r = class_average_precision(images, c, t);
            row[k] = r.ap;
            any = !r.no_truths;
        }
        if any {
            evaluated.push(c);
        }
    }
    let mean_at = |k: usize| -> f64 {
        if evaluated.is_empty() {
            0.0
        } else {
            evaluated.iter().map(|&c| per_class[c][k]).sum::<f64>() / evaluated.len() as f64
        }
    };
    let per_threshold: Vec<f64> = (0..thresholds.len()).map(mean_at).collect();
    let map50 = match thresholds.iter().position(|t| (t - 0.5).abs() < 1e-9) {
        Some(k) => per_threshold[k],
        None => class_map_at(images, num_classes, 0.5),
    };
    Ok(MapResult {
        map50,
        map50_95: per_threshold.iter().sum::<f64>() / per_threshold.len() as f64,
        thresholds: thresholds.to_vec(),
        per_class,
        evaluated_classes: evaluated,
    })
}

fn class_map_at(images: &[ImageResult], num_classes: usize, thr: f64) -> f64 {
    let aps: Vec<f64> = (0..num_classes)
        .map(|c| class_average_precision(images, c, thr))
        .filter(|r| !r.no_truths)
        .map(|r| r.ap)
        .collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// `(C+1)×(C+1)` counts indexed `[true][predicted]`; index `C` is background.
/// Detections below `conf_threshold` are ignored and matching is
/// class-agnostic so that misclassifications land off the diagonal.
pub fn confusion_matrix(
    images: &[ImageResult],
    num_classes: usize,
    iou_threshold: f64,
    conf_threshold: f64,
) -> Result<Vec<Vec<u64>>> {
    let bg = num_classes;
    let mut m = vec![vec![0u64; num_classes + 1]; num_classes + 1];
    for r in images {
        let dets: Vec<Detection> = r.detections.iter().copied().filter(|d| d.score >= conf_threshold).collect();
        for d in dets.iter().map(|d| d.class_id).chain(r.truths.iter().map(|t| t.class_id)) {
            if d >= num_classes {
                return Err(Error::invalid("confusion_matrix", format!("class {d} >= {num_classes}")));
            }
        }
        let mut taken = vec![false; r.truths.len()];
        for i in score_order(&dets) {
            match best_unmatched(&dets[i], &r.truths, &taken, iou_threshold, false) {
                Some(j) => {
                    taken[j] = true;
                    m[r.truths[j].class_id][dets[i].class_id] += 1;
                }
                None => m[bg][dets[i].class_id] += 1,
            }
        }
        for (j, t) in r.truths.iter().enumerate() {
            if !taken[j] {
                m[t.class_id][bg] += 1;
            }
        }
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRates {
    pub micro: f64,
    pub per_class: Vec<f64>,
}

/// Evaluation summary. Rates are fractions in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: ClassRates,
    pub recall: ClassRates,
    pub f1: ClassRates,
    /// `[class][threshold]`, thresholds as in `ap_thresholds`.
    pub ap: Vec<Vec<f64>>,
    pub ap_thresholds: Vec<f64>,
    pub map50: f64,
    pub map50_95: f64,
    pub confusion: Vec<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flops: Option<u64>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// AP@.5 of one class.
    pub fn ap50(&self, class_id: usize) -> f64 {
        self.ap[class_id][0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    pub num_classes: usize,
    /// Precision, recall, F1 and the confusion matrix use detections at or above this score.
    pub conf_threshold: f64,
    pub iou_threshold: f64,
}

/// Full report: AP uses every detection, P/R/F1 and the confusion matrix
/// only those at or above the confidence threshold.
pub fn evaluate(images: &[ImageResult], s: &EvalSettings) -> Result<EvalReport> {
    let maps = map_at(images, s.num_classes, &coco_thresholds())?;
    let mut tp = vec![0usize; s.num_classes];
    let mut fp = vec![0usize; s.num_classes];
    let mut fn_ = vec![0usize; s.num_classes];
    for r in images {
        let dets: Vec<Detection> = r.detections.iter().copied().filter(|d| d.score >= s.conf_threshold).collect();
        let m = match_detections(&dets, &r.truths, s.iou_threshold);
        for (i, d) in dets.iter().enumerate() {
            if d.class_id >= s.num_classes {
                return Err(Error::invalid("evaluate", format!("class {} >= {}", d.class_id, s.num_classes)));
            }
            if m.is_tp(i) {
                tp[d.class_id] += 1;
            } else {
                fp[d.class_id] += 1;
            }
        }
        for (j, t) in r.truths.iter().enumerate() {
            if t.class_id >= s.num_classes {
                return Err(Error::invalid("evaluate", format!("class {} >= {}", t.class_id, s.num_classes)));
            }
            if !m.truth_matched[j] {
                fn_[t.class_id] += 1;
            }
        }
    }
    let per: Vec<PrecisionRecall> = (0..s.num_classes).map(|c| precision_recall_counts(tp[c], fp[c], fn_[c])).collect();
    let micro = precision_recall_counts(tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    Ok(EvalReport {
        precision: ClassRates {
            micro: micro.precision,
            per_class: per.iter().map(|p| p.precision).collect(),
        },
        recall: ClassRates {
            micro: micro.recall,
            per_class: per.iter().map(|p| p.recall).collect(),
        },
        f1: ClassRates {
            micro: f1(micro.precision, micro.recall),
            per_class: per.iter().map(|p| f1(p.precision, p.recall)).collect(),
        },
        ap: maps.per_class,
        ap_thresholds: maps.thresholds,
        map50: maps.map50,
        map50_95: maps.map50_95,
        confusion: confusion_matrix(images, s.num_classes, s.iou_threshold, s.conf_threshold)?,
        flops: None,
    })
}
