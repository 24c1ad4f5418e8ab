//! Anchor grid and the objectness head that ranks anchors into proposals.

use rand::Rng;

use super::boxes::{score_desc, BBox};
use crate::cat::SpatialFeature;
use crate::error::{CatError, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
    /// Flat anchor index in `(row, col, anchor)` order.
    pub anchor: usize,
}

/// Square anchors of each configured size centered on every feature cell.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub sizes: Vec<f64>,
    pub image_width: f64,
    pub image_height: f64,
}

impl AnchorGrid {
    pub fn new(feat: &SpatialFeature, sizes: &[f64], image_width: usize, image_height: usize) -> Result<Self> {
        if sizes.is_empty() || sizes.iter().any(|s| !(*s > 0.0)) {
            return Err(CatError::config("anchor sizes must be positive and non-empty"));
        }
        Ok(AnchorGrid {
            height: feat.height,
            width: feat.width,
            stride: feat.stride,
            sizes: sizes.to_vec(),
            image_width: image_width as f64,
            image_height: image_height as f64,
        })
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(row, col, anchor)` for a flat index.
    pub fn unflatten(&self, flat: usize) -> (usize, usize, usize) {
        let a = self.sizes.len();
        (flat / (self.width * a), (flat / a) % self.width, flat % a)
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let s = self.stride as f64;
        ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
    }

    /// Anchor box clipped to the image.
    pub fn anchor(&self, flat: usize) -> BBox {
        let (r, c, a) = self.unflatten(flat);
        let (cx, cy) = self.cell_center(r, c);
        let s = self.sizes[a];
        BBox::from_center(cx, cy, s, s).clip(self.image_width, self.image_height)
    }

    pub fn boxes(&self) -> Vec<BBox> {
        (0..self.len()).map(|i| self.anchor(i)).collect()
    }

    /// Position of anchor `flat` in an `A×H×W` objectness tensor.
    pub fn score_index(&self, flat: usize) -> usize {
        let (r, c, a) = self.unflatten(flat);
        a * self.height * self.width + r * self.width + c
    }
}

/// 1×1 convolution from `d_model` channels to one objectness logit per anchor size.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalHead {
    pub anchors_per_cell: usize,
    pub w: ParamId,
    pub b: ParamId,
}

impl ProposalHead {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        anchors_per_cell: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ProposalHead {
            anchors_per_cell,
            w: store.register(
                format!("{prefix}.w"),
                Tensor::uniform_fan_in(&[anchors_per_cell, d_model, 1, 1], d_model, rng),
            )?,
            b: store.register(format!("{prefix}.b"), Tensor::zeros(&[anchors_per_cell]))?,
        })
    }

    /// Objectness logits, `A×H×W`.
    pub fn forward(&self, g: &mut Graph, f_t: &SpatialFeature) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.conv2d(f_t.var, w, Some(b), 1, 0)
    }
}

/// Top-`k` anchors by objectness; ties go to the lower `(row, col, anchor)`.
pub fn generate_proposals(objectness: &Tensor, anchors: &AnchorGrid, k: usize) -> Result<Vec<Proposal>> {
    if k == 0 {
        return Err(CatError::contract("proposal count must be at least 1"));
    }
    let expect = [anchors.sizes.len(), anchors.height, anchors.width];
    if objectness.shape() != expect {
        return Err(CatError::dim("generate_proposals", objectness.shape(), &expect));
    }
    let n = anchors.len();
    if k > n {
        log::warn!("requested {k} proposals but only {n} anchors exist; returning all");
    }
    let scores = objectness.data();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| score_desc(scores[anchors.score_index(a)], scores[anchors.score_index(b)]).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .map(|i| Proposal {
            bbox: anchors.anchor(i),
            objectness: scores[anchors.score_index(i)],
            anchor: i,
        })
        .filter(|p| p.bbox.is_valid())
        .take(k)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;
    use proptest::prelude::*;

    fn grid(h: usize, w: usize, sizes: &[f64]) -> AnchorGrid {
        AnchorGrid {
            height: h,
            width: w,
            stride: 16,
            sizes: sizes.to_vec(),
            image_width: (w * 16) as f64,
            image_height: (h * 16) as f64,
        }
    }

    #[test]
    fn single_firing_cell_is_top_proposal() {
        let g = grid(5, 6, &[32.0]);
        let mut obj = Tensor::full(&[1, 5, 6], -3.0);
        obj.set(&[0, 2, 4], 5.0);
        let p = generate_proposals(&obj, &g, 1).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].bbox.center(), ((4.0 + 0.5) * 16.0, (2.0 + 0.5) * 16.0));
    }

    #[test]
    fn equal_scores_break_ties_by_position() {
        let g = grid(3, 3, &[16.0, 32.0]);
        let obj = Tensor::zeros(&[2, 3, 3]);
        let p = generate_proposals(&obj, &g, 5).unwrap();
        let idx: Vec<usize> = p.iter().map(|p| p.anchor).collect();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
        assert_eq!(g.unflatten(3), (0, 1, 1));
    }

    #[test]
    fn oversized_k_returns_everything() {
        let g = grid(2, 2, &[16.0]);
        let p = generate_proposals(&Tensor::zeros(&[1, 2, 2]), &g, 50).unwrap();
        assert_eq!(p.len(), 4);
        assert!(generate_proposals(&Tensor::zeros(&[1, 2, 2]), &g, 0).is_err());
    }

    #[test]
    fn anchors_are_clipped() {
        let g = grid(4, 4, &[64.0]);
        for b in g.boxes() {
            assert!(b.is_valid() && b.within(64.0, 64.0));
        }
    }

    proptest! {
        #[test]
        fn matches_full_sort(seed in 0u64..1000, k in 1usize..40) {
            let g = grid(4, 5, &[24.0, 40.0]);
            let mut obj = Tensor::uniform(&[2, 4, 5], -1.0, 1.0, &mut seeded_rng(seed));
            // coarse quantization produces ties
            obj.data_mut().iter_mut().for_each(|v| *v = (*v * 4.0).round());
            let got = generate_proposals(&obj, &g, k).unwrap();
            let mut all: Vec<(f64, usize)> = (0..g.len()).map(|i| (obj.data()[g.score_index(i)], i)).collect();
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<usize> = all.iter().take(k).map(|x| x.1).collect();
            let have: Vec<usize> = got.iter().map(|p| p.anchor).collect();
            prop_assert_eq!(have, want);
        }
    }
}
