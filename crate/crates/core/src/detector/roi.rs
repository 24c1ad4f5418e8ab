//! RoI pooling by bilinear sampling.
//!
//! A box is divided into `s×s` bins and the feature map is sampled once at
//! each bin center. Feature cell `(i, j)` sits at pixel
//! `((j + 0.5)·stride, (i + 0.5)·stride)`, so pixel `x` maps to feature
//! coordinate `x/stride − 0.5`. Sampling is a fixed linear map of the
//! flattened feature map with at most four taps per bin.

use super::boxes::BBox;
use crate::cat::{flatten_spatial, SpatialFeature};
use crate::error::{CatError, Result};
use crate::numerics::{Graph, SparseEntry, Var};

/// Bilinear taps `(cell index, weight)` for a point in pixel coordinates.
fn bilinear_taps(x: f64, y: f64, height: usize, width: usize, stride: usize) -> [(usize, f64); 4] {
    let s = stride as f64;
    let u = (x / s - 0.5).clamp(0.0, (width - 1) as f64);
    let v = (y / s - 0.5).clamp(0.0, (height - 1) as f64);
    let (u0, v0) = (u.floor() as usize, v.floor() as usize);
    let (u1, v1) = ((u0 + 1).min(width - 1), (v0 + 1).min(height - 1));
    let (fu, fv) = (u - u0 as f64, v - v0 as f64);
    [
        (v0 * width + u0, (1.0 - fu) * (1.0 - fv)),
        (v0 * width + u1, fu * (1.0 - fv)),
        (v1 * width + u0, (1.0 - fu) * fv),
        (v1 * width + u1, fu * fv),
    ]
}

fn checked_box(b: &BBox, height: usize, width: usize, stride: usize) -> Result<BBox> {
    let c = b.clip((width * stride) as f64, (height * stride) as f64);
    if !c.is_valid() {
        return Err(CatError::contract(format!("degenerate RoI {b:?} after clipping")));
    }
    Ok(c)
}

/// Sparse sampling rows; output row `r·s² + a·s + b` is bin `(a, b)` of box `r`.
pub fn sampling_entries(
    boxes: &[BBox],
    s: usize,
    height: usize,
    width: usize,
    stride: usize,
) -> Result<Vec<SparseEntry>> {
    if s == 0 || height == 0 || width == 0 {
        return Err(CatError::contract("RoI pooling needs a non-empty grid and output size"));
    }
    let mut entries = Vec::with_capacity(boxes.len() * s * s * 4);
    for (r, b) in boxes.iter().enumerate() {
        let b = checked_box(b, height, width, stride)?;
        let (bw, bh) = (b.width() / s as f64, b.height() / s as f64);
        for a in 0..s {
            let y = b.y1 + (a as f64 + 0.5) * bh;
            for c in 0..s {
                let x = b.x1 + (c as f64 + 0.5) * bw;
                let out = ((r * s + a) * s + c) as u32;
                for (idx, weight) in bilinear_taps(x, y, height, width, stride) {
                    if weight != 0.0 {
                        entries.push(SparseEntry {
                            out,
                            input: idx as u32,
                            weight,
                        });
                    }
                }
            }
        }
    }
    Ok(entries)
}

/// Collapse per-bin sampling rows into one averaged row per box.
fn mean_entries(entries: &[SparseEntry], bins: usize) -> Vec<SparseEntry> {
    entries
        .iter()
        .map(|e| SparseEntry {
            out: e.out / bins as u32,
            input: e.input,
            weight: e.weight / bins as f64,
        })
        .collect()
}

/// Pool one box from `feat` into a `C×s×s` value.
pub fn roi_pool(g: &mut Graph, feat: &SpatialFeature, b: &BBox, s: usize) -> Result<Var> {
    let seq = flatten_spatial(g, feat)?;
    let entries = sampling_entries(std::slice::from_ref(b), s, feat.height, feat.width, feat.stride)?;
    let pooled = g.sparse_rows(seq, s * s, entries)?;
    let t = g.transpose(pooled)?;
    g.reshape(t, &[feat.channels, s, s])
}

/// Pool many boxes from a flattened `(H·W)×C` feature sequence. Returns
/// `n × (s²·C)` with each row ordered bin-major, plus the `n × C` per-box means.
pub fn roi_pool_batch(g: &mut Graph, seq: Var, feat: &SpatialFeature, boxes: &[BBox], s: usize) -> Result<(Var, Var)> {
    if boxes.is_empty() {
        return Err(CatError::contract("roi_pool_batch needs at least one box"));
    }
    let n = boxes.len();
    let entries = sampling_entries(boxes, s, feat.height, feat.width, feat.stride)?;
    let means = mean_entries(&entries, s * s);
    let pooled = g.sparse_rows(seq, n * s * s, entries)?;
    let pooled = g.reshape(pooled, &[n, s * s * feat.channels])?;
    let gap = g.sparse_rows(seq, n, means)?;
    Ok((pooled, gap))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{seeded_rng, Tensor};

    fn feature(g: &mut Graph, t: Tensor) -> SpatialFeature {
        let v = g.constant(t);
        SpatialFeature::from_var(g, v, 16).unwrap()
    }

    #[test]
    fn box_covering_one_cell_returns_that_cell() {
        let t = Tensor::uniform(&[5, 4, 6], -1.0, 1.0, &mut seeded_rng(2));
        let mut g = Graph::new();
        let f = feature(&mut g, t.clone());
        let (i, j) = (2, 3);
        let b = BBox::new(
            16.0 * j as f64,
            16.0 * i as f64,
            16.0 * (j + 1) as f64,
            16.0 * (i + 1) as f64,
        );
        let out = roi_pool(&mut g, &f, &b, 1).unwrap();
        for c in 0..5 {
            assert!((g.value(out).data()[c] - t.get(&[c, i, j])).abs() <= 1e-12);
        }
    }

    #[test]
    fn constant_map_gives_constant_output() {
        let mut g = Graph::new();
        let f = feature(&mut g, Tensor::full(&[3, 5, 5], 1.75));
        let out = roi_pool(&mut g, &f, &BBox::new(3.0, 11.0, 70.0, 33.0), 7).unwrap();
        assert!(g.value(out).data().iter().all(|v| (v - 1.75).abs() <= 1e-12));
    }

    #[test]
    fn degenerate_box_rejected() {
        let mut g = Graph::new();
        let f = feature(&mut g, Tensor::zeros(&[2, 4, 4]));
        assert!(roi_pool(&mut g, &f, &BBox::new(100.0, 0.0, 120.0, 10.0), 2).is_err());
    }

    #[test]
    fn batch_rows_match_single_pool() {
        let t = Tensor::uniform(&[4, 5, 6], -1.0, 1.0, &mut seeded_rng(4));
        let boxes = [BBox::new(4.0, 9.0, 60.0, 50.0), BBox::new(30.0, 2.0, 90.0, 79.0)];
        let mut g = Graph::new();
        let f = feature(&mut g, t);
        let seq = flatten_spatial(&mut g, &f).unwrap();
        let (pooled, gap) = roi_pool_batch(&mut g, seq, &f, &boxes, 3).unwrap();
        for (r, b) in boxes.iter().enumerate() {
            let single = roi_pool(&mut g, &f, b, 3).unwrap();
            let sv = g.value(single).clone();
            let row = g.value(pooled).row(r).to_vec();
            let mut mean = vec![0.0; 4];
            for c in 0..4 {
                for k in 0..9 {
                    let v = sv.data()[c * 9 + k];
                    assert!((row[k * 4 + c] - v).abs() <= 1e-12);
                    mean[c] += v / 9.0;
                }
                assert!((g.value(gap).row(r)[c] - mean[c]).abs() <= 1e-12);
            }
        }
    }
}
