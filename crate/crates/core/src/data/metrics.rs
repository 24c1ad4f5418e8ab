//! Average precision for detection.

use crate::detector::{iou, score_desc, BBox};
use crate::error::{CatError, Result};

/// A detection on image `image` (index into the ground-truth list).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// IoU thresholds `0.50, 0.55, …, 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Area under the precision/recall curve after greedy score-ordered
/// matching. Each detection takes the highest-IoU unmatched ground-truth box
/// of its image at IoU ≥ `iou_threshold`. Precision is replaced by its
/// running maximum from the right before integrating over recall. Equal
/// scores are ranked by detection index.
pub fn evaluate_ap(detections: &[ScoredBox], ground_truth: &[Vec<BBox>], iou_threshold: f64) -> Result<f64> {
    let n_gt: usize = ground_truth.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return Err(CatError::contract(
            "average precision is undefined without ground truth",
        ));
    }
    if let Some(d) = detections.iter().find(|d| d.image >= ground_truth.len()) {
        return Err(CatError::contract(format!(
            "detection refers to unknown image {}",
            d.image
        )));
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| score_desc(detections[a].score, detections[b].score).then(a.cmp(&b)));
    let mut taken: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    for (rank, &i) in order.iter().enumerate() {
        let d = &detections[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in ground_truth[d.image].iter().enumerate() {
            if taken[d.image][j] {
                continue;
            }
            let v = iou(&d.bbox, g);
            if v >= iou_threshold && best.map_or(true, |(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[d.image][j] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Ok(ap)
}

/// `(AP averaged over 0.50:0.05:0.95, AP at 0.50)`.
pub fn ap_and_ap50(detections: &[ScoredBox], ground_truth: &[Vec<BBox>]) -> Result<(f64, f64)> {
    let mut sum = 0.0;
    let mut ap50 = 0.0;
    for (i, t) in coco_thresholds().into_iter().enumerate() {
        let ap = evaluate_ap(detections, ground_truth, t)?;
        if i == 0 {
            ap50 = ap;
        }
        sum += ap;
    }
    Ok((sum / 10.0, ap50))
}
