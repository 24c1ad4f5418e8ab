use serde::{Deserialize, Serialize};

use crate::error::{CatError, Result};

/// Axis-aligned box in pixel coordinates, serialized as `[x1, y1, x2, y2]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(a: [f64; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x2 > self.x1 && self.y2 > self.y1 && [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Regression deltas `(dx, dy, dw, dh)`: center offsets relative to the
/// reference size and log size ratios.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxDeltas {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

/// Upper bound on `dw`/`dh` before exponentiation, as in common detectors.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000/16)

pub fn encode_deltas(reference: &BBox, target: &BBox) -> Result<BoxDeltas> {
    if !reference.is_valid() || !target.is_valid() {
        return Err(CatError::contract("cannot encode deltas for a degenerate box"));
    }
    let (rcx, rcy) = reference.center();
    let (tcx, tcy) = target.center();
    Ok(BoxDeltas {
        dx: (tcx - rcx) / reference.width(),
        dy: (tcy - rcy) / reference.height(),
        dw: (target.width() / reference.width()).ln(),
        dh: (target.height() / reference.height()).ln(),
    })
}

pub fn decode_deltas(reference: &BBox, d: &BoxDeltas) -> BBox {
    let (rcx, rcy) = reference.center();
    let (w, h) = (reference.width(), reference.height());
    let cx = rcx + d.dx * w;
    let cy = rcy + d.dy * h;
    let nw = w * d.dw.min(MAX_LOG_SCALE).exp();
    let nh = h * d.dh.min(MAX_LOG_SCALE).exp();
    BBox::from_center(cx, cy, nw, nh)
}

/// Descending score order, total over floats, with `-0.0` equal to `0.0`.
pub fn score_desc(a: f64, b: f64) -> std::cmp::Ordering {
    (b + 0.0).total_cmp(&(a + 0.0))
}

/// Greedy non-maximum suppression. Returns kept indices ordered by score
/// descending; equal scores keep input order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| score_desc(scores[a], scores[b]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_basics() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(20.0, 20.0, 30.0, 30.0)), 0.0);
        let b = BBox::new(5.0, 0.0, 15.0, 10.0);
        assert!((iou(&a, &b) - 50.0 / 150.0).abs() < 1e-12);
    }

    #[test]
    fn zero_deltas_leave_box_unchanged() {
        let b = BBox::new(3.0, 4.0, 20.0, 30.0);
        let z = BoxDeltas {
            dx: 0.0,
            dy: 0.0,
            dw: 0.0,
            dh: 0.0,
        };
        assert_eq!(decode_deltas(&b, &z), b);
    }

    #[test]
    fn log_two_doubles_about_center() {
        let b = BBox::new(10.0, 10.0, 30.0, 20.0);
        let d = BoxDeltas {
            dx: 0.0,
            dy: 0.0,
            dw: 2f64.ln(),
            dh: 2f64.ln(),
        };
        let out = decode_deltas(&b, &d);
        let expect = BBox::new(0.0, 5.0, 40.0, 25.0);
        for (x, y) in <[f64; 4]>::from(out).iter().zip(<[f64; 4]>::from(expect)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn nms_identical_boxes_leave_one() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[b, b], &[0.4, 0.9], 0.5), vec![1]);
    }

    #[test]
    fn serializes_as_array() {
        let b = BBox::new(1.0, 2.0, 3.0, 4.0);
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1.0,2.0,3.0,4.0]");
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..200.0f64, 0.0..200.0f64, 2.0..80.0f64, 2.0..80.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(r in arb_box(), t in arb_box()) {
            let d = encode_deltas(&r, &t).unwrap();
            let back = decode_deltas(&r, &d);
            for (x, y) in <[f64; 4]>::from(back).iter().zip(<[f64; 4]>::from(t)) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }

        #[test]
        fn nms_never_grows(boxes in proptest::collection::vec(arb_box(), 0..20), thr in 0.1..0.9f64) {
            let scores: Vec<f64> = (0..boxes.len()).map(|i| ((i * 37) % 11) as f64).collect();
            let keep = nms(&boxes, &scores, thr);
            prop_assert!(keep.len() <= boxes.len());
            for w in keep.windows(2) {
                prop_assert!(scores[w[0]] >= scores[w[1]]);
            }
        }
    }
}
