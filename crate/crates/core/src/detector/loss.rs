//! Training targets and the three-term detection loss.
//!
//! * objectness: binary cross-entropy over anchors, positive at IoU ≥ `pos_iou`
//!   (and the best anchor of every ground-truth box), negative below
//!   `neg_iou`, ignored in between;
//! * match: binary cross-entropy over RoIs, positive at IoU ≥ `match_iou`;
//! * regression: smooth-L1 on scaled deltas of positive RoIs.
//!
//! Both cross-entropy terms give positives and negatives equal total weight
//! so the rare positives are not swamped. The terms are summed unweighted.

use serde::{Deserialize, Serialize};

use super::boxes::{encode_deltas, iou, BBox};
use super::heads::DeltaWeights;
use super::proposals::AnchorGrid;
use crate::error::{CatError, Result};
use crate::numerics::{Graph, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub match_iou: f64,
    pub smooth_l1_beta: f64,
    pub delta_weights: [f64; 4],
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            pos_iou: 0.5,
            neg_iou: 0.3,
            match_iou: 0.5,
            smooth_l1_beta: 1.0,
            delta_weights: DeltaWeights::default().0,
        }
    }
}

/// Equal total weight for the positive and the negative set; `None` labels
/// get zero weight.
pub fn balanced_weights(labels: &[Option<bool>]) -> (Vec<f64>, Vec<f64>) {
    let pos = labels.iter().filter(|l| **l == Some(true)).count();
    let neg = labels.iter().filter(|l| **l == Some(false)).count();
    let groups = (pos > 0) as usize + (neg > 0) as usize;
    let share = |n: usize| if n == 0 { 0.0 } else { 1.0 / (groups as f64 * n as f64) };
    let (wp, wn) = (share(pos), share(neg));
    labels
        .iter()
        .map(|l| match l {
            Some(true) => (1.0, wp),
            Some(false) => (0.0, wn),
            None => (0.0, 0.0),
        })
        .unzip()
}

fn best_match(b: &BBox, gt: &[BBox]) -> (usize, f64) {
    gt.iter()
        .enumerate()
        .map(|(i, g)| (i, iou(b, g)))
        .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc })
}

/// Anchor labels in flat `(row, col, anchor)` order.
pub fn label_anchors(anchors: &AnchorGrid, gt: &[BBox], cfg: &LossConfig) -> Result<Vec<Option<bool>>> {
    if gt.is_empty() {
        return Err(CatError::contract(
            "a training sample needs at least one ground-truth box",
        ));
    }
    let boxes = anchors.boxes();
    let mut labels: Vec<Option<bool>> = boxes
        .iter()
        .map(|b| {
            let (_, best) = best_match(b, gt);
            if best >= cfg.pos_iou {
                Some(true)
            } else if best < cfg.neg_iou {
                Some(false)
            } else {
                None
            }
        })
        .collect();
    for g in gt {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, b) in boxes.iter().enumerate() {
            let v = iou(b, g);
            if v > best.1 {
                best = (i, v);
            }
        }
        if best.1 > 0.0 {
            labels[best.0] = Some(true);
        }
    }
    Ok(labels)
}

/// Targets for each RoI: match label and, for positives, the scaled deltas to
/// the best-overlapping ground-truth box.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiTargets {
    pub labels: Vec<bool>,
    pub deltas: Vec<Option<[f64; 4]>>,
}

pub fn label_rois(rois: &[BBox], gt: &[BBox], cfg: &LossConfig) -> Result<RoiTargets> {
    if gt.is_empty() {
        return Err(CatError::contract(
            "a training sample needs at least one ground-truth box",
        ));
    }
    let weights = DeltaWeights(cfg.delta_weights);
    let mut labels = Vec::with_capacity(rois.len());
    let mut deltas = Vec::with_capacity(rois.len());
    for r in rois {
        let (gi, best) = best_match(r, gt);
        let pos = best >= cfg.match_iou;
        labels.push(pos);
        deltas.push(if pos {
            Some(weights.scale(&encode_deltas(r, &gt[gi])?))
        } else {
            None
        });
    }
    Ok(RoiTargets { labels, deltas })
}

/// Raw head outputs for one sample.
#[derive(Clone, Debug)]
pub struct HeadOutputs<'a> {
    /// `A×H×W` objectness logits.
    pub objectness: Var,
    pub anchors: &'a AnchorGrid,
    pub rois: &'a [BBox],
    /// `n` match logits.
    pub match_logits: Var,
    /// `n×4` regressor outputs.
    pub regression: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub objectness: f64,
    pub matching: f64,
    pub regression: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.objectness + self.matching + self.regression
    }
}

pub fn detection_loss(g: &mut Graph, out: &HeadOutputs<'_>, gt: &[BBox], cfg: &LossConfig) -> Result<(Var, LossTerms)> {
    let anchors = out.anchors;
    let labels = label_anchors(anchors, gt, cfg)?;
    let (t_flat, w_flat) = balanced_weights(&labels);
    // reorder from (row, col, anchor) to the head's A×H×W layout
    let mut targets = vec![0.0; labels.len()];
    let mut weights = vec![0.0; labels.len()];
    for i in 0..labels.len() {
        let j = anchors.score_index(i);
        targets[j] = t_flat[i];
        weights[j] = w_flat[i];
    }
    let obj = g.bce_with_logits(out.objectness, targets, weights)?;

    let roi = label_rois(out.rois, gt, cfg)?;
    if g.value(out.match_logits).numel() != out.rois.len() {
        return Err(CatError::dim(
            "detection_loss match logits",
            g.shape(out.match_logits),
            &[out.rois.len()],
        ));
    }
    let opt: Vec<Option<bool>> = roi.labels.iter().map(|&l| Some(l)).collect();
    let (mt, mw) = balanced_weights(&opt);
    let matching = g.bce_with_logits(out.match_logits, mt, mw)?;

    let n_pos = roi.deltas.iter().filter(|d| d.is_some()).count();
    let mut rt = vec![0.0; out.rois.len() * 4];
    let mut rw = vec![0.0; out.rois.len() * 4];
    for (i, d) in roi.deltas.iter().enumerate() {
        if let Some(d) = d {
            rt[i * 4..i * 4 + 4].copy_from_slice(d);
            rw[i * 4..i * 4 + 4].fill(1.0 / n_pos as f64);
        }
    }
    let reg = g.smooth_l1(out.regression, rt, rw, cfg.smooth_l1_beta)?;

    let terms = LossTerms {
        objectness: g.value(obj).item(),
        matching: g.value(matching).item(),
        regression: g.value(reg).item(),
    };
    let total = g.add(obj, matching)?;
    let total = g.add(total, reg)?;
    Ok((total, terms))
}
