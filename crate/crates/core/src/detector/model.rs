use std::io::Write;

use serde::{Deserialize, Serialize};

use super::backbone::{backbone_forward, Backbone, BACKBONE_STRIDE};
use super::boxes::{nms, BBox};
use super::heads::{global_average_pool, regress_box, similarity_logits, DeltaWeights, Mlp};
use super::loss::{detection_loss, HeadOutputs, LossConfig, LossTerms};
use super::proposals::{generate_proposals, AnchorGrid, ProposalHead};
use super::roi::roi_pool_batch;
use crate::cat::{
    cat_forward, compress_channels, flatten_spatial, CatConfig, CatOutput, CatParams, CompressParams, StreamMode,
    UpdateOrder,
};
use crate::encoding::EncodingCache;
use crate::error::{CatError, Result};
use crate::numerics::kernels::sigmoid;
use crate::numerics::{seeded_rng, Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub image_size: usize,
    pub query_size: usize,
    pub backbone_channels: [usize; 4],
    pub anchor_sizes: Vec<f64>,
    pub roi_size: usize,
    pub train_proposals: usize,
    pub test_proposals: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub loss: LossConfig,
    pub cat: CatConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            image_size: 208,
            query_size: 64,
            backbone_channels: [8, 16, 32, 64],
            anchor_sizes: vec![32.0, 48.0, 64.0],
            roi_size: 7,
            train_proposals: 32,
            test_proposals: 64,
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
            loss: LossConfig::default(),
            cat: CatConfig {
                d_model: 64,
                heads: 4,
                layers: 4,
                d_ff: 256,
                mode: StreamMode::TwoStream,
                order: UpdateOrder::Parallel,
                tie_streams: false,
                projection_bias: false,
            },
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.cat.validate()?;
        if self.image_size < 32 || self.query_size < 32 {
            return Err(CatError::config("image and query sizes must be at least 32"));
        }
        if self.roi_size == 0 || self.train_proposals == 0 || self.test_proposals == 0 {
            return Err(CatError::config("RoI size and proposal counts must be positive"));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(CatError::config("score threshold and NMS IoU must lie in [0, 1]"));
        }
        if self.anchor_sizes.is_empty() || self.anchor_sizes.iter().any(|s| !(*s > 0.0)) {
            return Err(CatError::config("anchor sizes must be positive and non-empty"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

/// One line of a detections JSON-lines file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    pub query_class: usize,
}

pub fn write_detections_jsonl<W: Write>(mut w: W, records: &[DetectionRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Bilinear resize of a `C×H×W` image (half-pixel centers).
pub fn resize_bilinear(img: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    if img.rank() != 3 || height == 0 || width == 0 {
        return Err(CatError::Input(format!(
            "cannot resize {:?} to {height}×{width}",
            img.shape()
        )));
    }
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if (h, w) == (height, width) {
        return Ok(img.clone());
    }
    let src = img.data();
    let mut out = Vec::with_capacity(c * height * width);
    let (sy, sx) = (h as f64 / height as f64, w as f64 / width as f64);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for i in 0..height {
            let y = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let (y0, fy) = (y.floor() as usize, y - y.floor());
            let y1 = (y0 + 1).min(h - 1);
            for j in 0..width {
                let x = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let (x0, fx) = (x.floor() as usize, x - x.floor());
                let x1 = (x0 + 1).min(w - 1);
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![c, height, width], out)
}

/// Map `[0, 1]` pixel intensities to `[-1, 1]`.
fn normalize(img: &Tensor) -> Tensor {
    img.map(|v| 2.0 * v - 1.0)
}

/// Everything the heads need from one forward pass over a target/query pair.
#[derive(Clone, Debug)]
pub struct Forward {
    pub cat: CatOutput,
    pub objectness: Var,
    pub anchors: AnchorGrid,
    pub target_seq: Var,
    pub query_gap: Var,
    pub image_width: usize,
    pub image_height: usize,
}

/// Backbone, channel compression, CAT stack, proposal head, similarity
/// classifier and box regressor, all parameters in one store.
#[derive(Debug)]
pub struct OneShotDetector {
    pub config: DetectorConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub compress: CompressParams,
    pub cat: CatParams,
    pub rpn: ProposalHead,
    pub classifier: Mlp,
    pub regressor: Mlp,
    encodings: EncodingCache,
}

impl OneShotDetector {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let mut store = ParamStore::new();
        let d = config.cat.d_model;
        let backbone = Backbone::register(&mut store, "backbone", &config.backbone_channels, &mut rng)?;
        let compress = CompressParams::register(&mut store, "compress", backbone.out_channels(), d, &mut rng)?;
        let cat = CatParams::register(&mut store, "cat", &config.cat, &mut rng)?;
        let rpn = ProposalHead::register(&mut store, "rpn", d, config.anchor_sizes.len(), &mut rng)?;
        let classifier = Mlp::register(&mut store, "cls", 2 * d, d, 1, &mut rng)?;
        let s2 = config.roi_size * config.roi_size;
        let regressor = Mlp::register(&mut store, "reg", s2 * d, d, 4, &mut rng)?;
        // small initial deltas keep early proposals in place
        store
            .get_mut(regressor.w2)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v *= 0.1);
        Ok(OneShotDetector {
            config,
            store,
            backbone,
            compress,
            cat,
            rpn,
            classifier,
            regressor,
            encodings: EncodingCache::default(),
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_elements()
    }

    pub fn encodings(&self) -> &EncodingCache {
        &self.encodings
    }

    /// Run everything up to the proposal head. The query is resized to the
    /// configured square first.
    pub fn forward(&self, g: &mut Graph, target: &Tensor, query: &Tensor) -> Result<Forward> {
        if target.rank() != 3 || target.shape()[0] != 3 {
            return Err(CatError::Input(format!(
                "target must be 3×H×W, got {:?}",
                target.shape()
            )));
        }
        let q = resize_bilinear(query, self.config.query_size, self.config.query_size)?;
        let (ih, iw) = (target.shape()[1], target.shape()[2]);
        let t_in = g.constant(normalize(target));
        let q_in = g.constant(normalize(&q));
        let phi_t = backbone_forward(g, t_in, &self.backbone)?;
        let phi_q = backbone_forward(g, q_in, &self.backbone)?;
        let phi_t = compress_channels(g, &phi_t, &self.compress)?;
        let phi_q = compress_channels(g, &phi_q, &self.compress)?;
        let cat = cat_forward(g, &phi_t, &phi_q, &self.cat, &self.encodings)?;
        let objectness = self.rpn.forward(g, &cat.f_t)?;
        let anchors = AnchorGrid::new(&cat.f_t, &self.config.anchor_sizes, iw, ih)?;
        let target_seq = flatten_spatial(g, &cat.f_t)?;
        let query_gap = global_average_pool(g, &cat.f_q)?;
        Ok(Forward {
            cat,
            objectness,
            anchors,
            target_seq,
            query_gap,
            image_width: iw,
            image_height: ih,
        })
    }

    /// Match logits (`n`) and regressor outputs (`n×4`) for the given RoIs.
    pub fn heads(&self, g: &mut Graph, fwd: &Forward, rois: &[BBox]) -> Result<(Var, Var)> {
        let (pooled, gap) = roi_pool_batch(g, fwd.target_seq, &fwd.cat.f_t, rois, self.config.roi_size)?;
        let logits = similarity_logits(g, gap, fwd.query_gap, &self.classifier)?;
        let reg = self.regressor.forward(g, pooled)?;
        Ok((logits, reg))
    }

    /// Training loss on one sample. RoIs are the top proposals plus the
    /// ground-truth boxes themselves.
    pub fn loss(&self, g: &mut Graph, target: &Tensor, query: &Tensor, gt: &[BBox]) -> Result<(Var, LossTerms)> {
        if gt.is_empty() {
            return Err(CatError::contract(
                "a training sample needs at least one ground-truth box",
            ));
        }
        let fwd = self.forward(g, target, query)?;
        let props = generate_proposals(g.value(fwd.objectness), &fwd.anchors, self.config.train_proposals)?;
        let mut rois: Vec<BBox> = props.iter().map(|p| p.bbox).collect();
        rois.extend_from_slice(gt);
        let (logits, reg) = self.heads(g, &fwd, &rois)?;
        let out = HeadOutputs {
            objectness: fwd.objectness,
            anchors: &fwd.anchors,
            rois: &rois,
            match_logits: logits,
            regression: reg,
        };
        detection_loss(g, &out, gt, &self.config.loss)
    }

    /// End-to-end inference: detections above the score threshold after NMS,
    /// sorted by score descending.
    pub fn detect(&self, target: &Tensor, query: &Tensor) -> Result<Vec<Detection>> {
        let mut g = Graph::with_params(&self.store).no_grad();
        let fwd = self.forward(&mut g, target, query)?;
        let props = generate_proposals(g.value(fwd.objectness), &fwd.anchors, self.config.test_proposals)?;
        let rois: Vec<BBox> = props.iter().map(|p| p.bbox).collect();
        let (logits, reg) = self.heads(&mut g, &fwd, &rois)?;
        let weights = DeltaWeights(self.config.loss.delta_weights);
        let (iw, ih) = (fwd.image_width as f64, fwd.image_height as f64);
        let mut boxes = Vec::with_capacity(rois.len());
        let mut scores = Vec::with_capacity(rois.len());
        for (i, roi) in rois.iter().enumerate() {
            let score = sigmoid(g.value(logits).data()[i]);
            let b = regress_box(g.value(reg).row(i), roi, &weights, iw, ih);
            if score >= self.config.score_threshold && b.is_valid() {
                boxes.push(b);
                scores.push(score);
            }
        }
        let keep = nms(&boxes, &scores, self.config.nms_iou);
        Ok(keep
            .into_iter()
            .take(self.config.max_detections)
            .map(|i| Detection {
                bbox: boxes[i],
                score: scores[i],
            })
            .collect())
    }

    /// Target feature maps entering the CAT stack and leaving each layer.
    pub fn target_trace(&self, target: &Tensor, query: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::with_params(&self.store).no_grad();
        let fwd = self.forward(&mut g, target, query)?;
        Ok(fwd.cat.target_trace.iter().map(|f| g.value(f.var).clone()).collect())
    }

    pub fn feature_stride(&self) -> usize {
        BACKBONE_STRIDE
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DetectorConfig {
        let mut c = DetectorConfig {
            image_size: 64,
            query_size: 32,
            backbone_channels: [4, 4, 8, 8],
            anchor_sizes: vec![16.0, 32.0],
            roi_size: 2,
            train_proposals: 4,
            test_proposals: 8,
            ..DetectorConfig::default()
        };
        c.cat.d_model = 8;
        c.cat.heads = 2;
        c.cat.layers = 1;
        c.cat.d_ff = 16;
        c
    }

    #[test]
    fn untrained_detect_scores_in_unit_interval() {
        let det = OneShotDetector::new(tiny(), 1).unwrap();
        let t = Tensor::uniform(&[3, 64, 64], 0.0, 1.0, &mut seeded_rng(2));
        let q = Tensor::uniform(&[3, 40, 40], 0.0, 1.0, &mut seeded_rng(3));
        let dets = det.detect(&t, &q).unwrap();
        for w in dets.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
        for d in &dets {
            assert!((0.0..=1.0).contains(&d.score));
            assert!(d.bbox.is_valid() && d.bbox.within(64.0, 64.0));
        }
        assert_eq!(dets, det.detect(&t, &q).unwrap());
    }

    #[test]
    fn loss_is_finite_and_requires_ground_truth() {
        let det = OneShotDetector::new(tiny(), 1).unwrap();
        let t = Tensor::uniform(&[3, 64, 64], 0.0, 1.0, &mut seeded_rng(2));
        let q = Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut seeded_rng(3));
        let mut g = Graph::with_params(&det.store);
        let (loss, terms) = det.loss(&mut g, &t, &q, &[BBox::new(10.0, 12.0, 40.0, 44.0)]).unwrap();
        assert!(g.value(loss).item().is_finite());
        assert!((g.value(loss).item() - terms.total()).abs() < 1e-12);
        let mut g = Graph::with_params(&det.store);
        assert!(det.loss(&mut g, &t, &q, &[]).is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let t = Tensor::uniform(&[3, 10, 12], 0.0, 1.0, &mut seeded_rng(0));
        assert_eq!(resize_bilinear(&t, 10, 12).unwrap(), t);
        let c = Tensor::full(&[3, 17, 9], 0.3);
        let r = resize_bilinear(&c, 8, 8).unwrap();
        assert!(r.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn detection_record_json_shape() {
        let r = DetectionRecord {
            image_id: "t0001".into(),
            bbox: BBox::new(1.0, 2.0, 3.0, 4.0),
            score: 0.5,
            query_class: 7,
        };
        let mut buf = Vec::new();
        write_detections_jsonl(&mut buf, &[r]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "{\"image_id\":\"t0001\",\"box\":[1.0,2.0,3.0,4.0],\"score\":0.5,\"query_class\":7}\n"
        );
    }
}
