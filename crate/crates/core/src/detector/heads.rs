//! Similarity classifier and box regressor applied to pooled RoI features.

use rand::Rng;

use super::boxes::{decode_deltas, BBox, BoxDeltas};
use crate::cat::SpatialFeature;
use crate::error::{CatError, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// Two-layer perceptron `relu(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Mlp {
            d_in,
            d_hidden,
            d_out,
            w1: store.register(
                format!("{prefix}.w1"),
                Tensor::uniform_fan_in(&[d_in, d_hidden], d_in, rng),
            )?,
            b1: store.register(format!("{prefix}.b1"), Tensor::zeros(&[d_hidden]))?,
            w2: store.register(
                format!("{prefix}.w2"),
                Tensor::uniform_fan_in(&[d_hidden, d_out], d_hidden, rng),
            )?,
            b2: store.register(format!("{prefix}.b2"), Tensor::zeros(&[d_out]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (g.param(self.w1), g.param(self.b1), g.param(self.w2), g.param(self.b2));
        let h = g.linear(x, w1, Some(b1))?;
        let h = g.relu(h);
        g.linear(h, w2, Some(b2))
    }
}

/// Global average pooling of a `C×H×W` feature: the per-channel spatial mean.
pub fn global_average_pool(g: &mut Graph, feat: &SpatialFeature) -> Result<Var> {
    let m = g.reshape(feat.var, &[feat.channels, feat.cells()])?;
    Ok(g.mean_last(m))
}

/// Match logits for `n` RoIs given their GAP vectors (`n×C`) and the query GAP (`C`).
pub fn similarity_logits(g: &mut Graph, roi_gap: Var, query_gap: Var, classifier: &Mlp) -> Result<Var> {
    let rs = g.shape(roi_gap).to_vec();
    let qn = g.value(query_gap).numel();
    if rs.len() != 2 || rs[1] != qn || 2 * qn != classifier.d_in {
        return Err(CatError::dim("similarity_logits", &rs, &[qn, classifier.d_in]));
    }
    let q = g.repeat_rows(query_gap, rs[0])?;
    let joint = g.concat_cols(&[roi_gap, q])?;
    let logits = classifier.forward(g, joint)?;
    g.reshape(logits, &[rs[0]])
}

/// Probability that a single pooled RoI (`C×s×s`) shows the query's class.
pub fn classify_similarity(g: &mut Graph, roi_feat: Var, f_q: &SpatialFeature, classifier: &Mlp) -> Result<Var> {
    let rs = g.shape(roi_feat).to_vec();
    if rs.len() != 3 || rs[0] != f_q.channels {
        return Err(CatError::dim("classify_similarity", &rs, &[f_q.channels]));
    }
    let roi = SpatialFeature::from_var(g, roi_feat, f_q.stride)?;
    let roi_gap = global_average_pool(g, &roi)?;
    let roi_gap = g.reshape(roi_gap, &[1, rs[0]])?;
    let q_gap = global_average_pool(g, f_q)?;
    let logit = similarity_logits(g, roi_gap, q_gap, classifier)?;
    Ok(g.sigmoid(logit))
}

/// Per-coordinate scale between regressor outputs and box deltas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeltaWeights(pub [f64; 4]);

impl Default for DeltaWeights {
    fn default() -> Self {
        DeltaWeights([10.0, 10.0, 5.0, 5.0])
    }
}

impl DeltaWeights {
    /// Regressor target for given deltas.
    pub fn scale(&self, d: &BoxDeltas) -> [f64; 4] {
        let w = self.0;
        [d.dx * w[0], d.dy * w[1], d.dw * w[2], d.dh * w[3]]
    }

    /// Deltas from a regressor output row.
    pub fn unscale(&self, out: &[f64]) -> BoxDeltas {
        let w = self.0;
        BoxDeltas {
            dx: out[0] / w[0],
            dy: out[1] / w[1],
            dw: out[2] / w[2],
            dh: out[3] / w[3],
        }
    }
}

/// Apply a regressor output row to a proposal and clip to the image.
pub fn regress_box(out: &[f64], proposal: &BBox, weights: &DeltaWeights, image_width: f64, image_height: f64) -> BBox {
    decode_deltas(proposal, &weights.unscale(out)).clip(image_width, image_height)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;

    #[test]
    fn gap_of_constant_map() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::full(&[3, 4, 5], 2.5));
        let f = SpatialFeature::from_var(&g, v, 16).unwrap();
        let p = global_average_pool(&mut g, &f).unwrap();
        assert_eq!(g.value(p).data(), &[2.5, 2.5, 2.5]);
    }

    #[test]
    fn gap_equals_explicit_mean() {
        let t = Tensor::uniform(&[4, 3, 7], -2.0, 2.0, &mut seeded_rng(1));
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let f = SpatialFeature::from_var(&g, v, 16).unwrap();
        let p = global_average_pool(&mut g, &f).unwrap();
        for c in 0..4 {
            let mut s = 0.0;
            for i in 0..3 {
                for j in 0..7 {
                    s += t.get(&[c, i, j]);
                }
            }
            assert!((g.value(p).data()[c] - s / 21.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_classifier_gives_half() {
        let mut store = ParamStore::new();
        let mlp = Mlp::register(&mut store, "cls", 8, 4, 1, &mut seeded_rng(0)).unwrap();
        for id in [mlp.w1, mlp.b1, mlp.w2, mlp.b2] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::with_params(&store);
        let roi = g.constant(Tensor::uniform(&[4, 2, 2], -1.0, 1.0, &mut seeded_rng(5)));
        let q = g.constant(Tensor::uniform(&[4, 3, 3], -1.0, 1.0, &mut seeded_rng(6)));
        let fq = SpatialFeature::from_var(&g, q, 16).unwrap();
        let p = classify_similarity(&mut g, roi, &fq, &mlp).unwrap();
        assert_eq!(g.value(p).data(), &[0.5]);
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let mut store = ParamStore::new();
        let mlp = Mlp::register(&mut store, "cls", 8, 4, 1, &mut seeded_rng(0)).unwrap();
        let mut g = Graph::with_params(&store);
        let roi = g.constant(Tensor::zeros(&[3, 2, 2]));
        let q = g.constant(Tensor::zeros(&[4, 3, 3]));
        let fq = SpatialFeature::from_var(&g, q, 16).unwrap();
        assert!(matches!(
            classify_similarity(&mut g, roi, &fq, &mlp),
            Err(CatError::Dimension { .. })
        ));
    }

    #[test]
    fn zero_output_keeps_proposal() {
        let b = BBox::new(10.0, 20.0, 50.0, 70.0);
        assert_eq!(regress_box(&[0.0; 4], &b, &DeltaWeights::default(), 208.0, 208.0), b);
    }
}
