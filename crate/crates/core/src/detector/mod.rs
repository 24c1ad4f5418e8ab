//! The two-stage one-shot detector built around the CAT stack.

pub mod backbone;
pub mod boxes;
pub mod heads;
pub mod loss;
mod model;
pub mod proposals;
pub mod roi;

pub use backbone::{backbone_forward, Backbone, BACKBONE_STRIDE};
pub use boxes::{decode_deltas, encode_deltas, iou, nms, score_desc, BBox, BoxDeltas};
pub use heads::{classify_similarity, global_average_pool, regress_box, DeltaWeights, Mlp};
pub use loss::{detection_loss, LossConfig, LossTerms};
pub use model::{
    resize_bilinear, write_detections_jsonl, Detection, DetectionRecord, DetectorConfig, Forward, OneShotDetector,
};
pub use proposals::{generate_proposals, AnchorGrid, Proposal, ProposalHead};
pub use roi::{roi_pool, roi_pool_batch};
