use crate::error::{Error, Result};
use crate::metrics::Detection;

/// Greedy per-class suppression. Detections are visited by descending
/// score (ties by lower input index); a detection survives unless an already
/// kept detection of the same class overlaps it with IoU above the
/// threshold. Survivors are returned in visiting order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(Error::invalid("nms", format!("IoU threshold {iou_threshold} outside (0, 1)")));
    }
    Ok(nms_indices(dets, iou_threshold).into_iter().map(|i| dets[i]).collect())
}

/// Input indices of the survivors, in visiting order.
pub fn nms_indices(dets: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|&k| dets[k].class_id == d.class_id && dets[k].bbox.iou(&d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}
