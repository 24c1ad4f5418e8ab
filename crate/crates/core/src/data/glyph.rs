//! Procedural glyph shapes and their rasterization.

use serde::{Deserialize, Serialize};

use crate::detector::BBox;

/// Shape families, one per class. Shapes are defined on `[-1, 1]²`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlyphFamily {
    Disk,
    Square,
    Triangle,
    Diamond,
    Pentagon,
    Hexagon,
    Star,
    Plus,
    Cross,
    Ring,
    Frame,
    Crescent,
    Bar,
    Tee,
    Ell,
    HalfDisk,
}

impl GlyphFamily {
    pub const ALL: [GlyphFamily; 16] = [
        GlyphFamily::Disk,
        GlyphFamily::Square,
        GlyphFamily::Triangle,
        GlyphFamily::Diamond,
        GlyphFamily::Pentagon,
        GlyphFamily::Hexagon,
        GlyphFamily::Star,
        GlyphFamily::Plus,
        GlyphFamily::Cross,
        GlyphFamily::Ring,
        GlyphFamily::Frame,
        GlyphFamily::Crescent,
        GlyphFamily::Bar,
        GlyphFamily::Tee,
        GlyphFamily::Ell,
        GlyphFamily::HalfDisk,
    ];

    pub fn contains(self, u: f64, v: f64) -> bool {
        let r2 = u * u + v * v;
        match self {
            GlyphFamily::Disk => r2 <= 1.0,
            GlyphFamily::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            GlyphFamily::Triangle => in_regular_polygon(u, v, 3, 1.0),
            GlyphFamily::Diamond => u.abs() + v.abs() <= 1.0,
            GlyphFamily::Pentagon => in_regular_polygon(u, v, 5, 1.0),
            GlyphFamily::Hexagon => in_regular_polygon(u, v, 6, 0.95),
            GlyphFamily::Star => in_star(u, v, 5, 1.0, 0.45),
            GlyphFamily::Plus => plus(u, v),
            GlyphFamily::Cross => {
                let s = std::f64::consts::FRAC_1_SQRT_2;
                plus(s * (u - v), s * (u + v))
            }
            GlyphFamily::Ring => (0.3..=1.0).contains(&r2),
            GlyphFamily::Frame => {
                let m = u.abs().max(v.abs());
                (0.5..=0.85).contains(&m)
            }
            GlyphFamily::Crescent => r2 <= 1.0 && (u - 0.45).powi(2) + v * v > 0.56,
            GlyphFamily::Bar => u * u + (v / 0.42).powi(2) <= 1.0,
            GlyphFamily::Tee => {
                (v <= -0.4 && v >= -0.95 && u.abs() <= 0.9) || (u.abs() <= 0.28 && v <= 0.95 && v >= -0.95)
            }
            GlyphFamily::Ell => {
                (u >= -0.9 && u <= -0.35 && v.abs() <= 0.95) || (v >= 0.4 && v <= 0.95 && u >= -0.9 && u <= 0.8)
            }
            GlyphFamily::HalfDisk => r2 <= 1.0 && v >= -0.2,
        }
    }

    pub fn name(self) -> String {
        serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default()
    }
}

fn plus(u: f64, v: f64) -> bool {
    (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95)
}

fn in_regular_polygon(u: f64, v: f64, n: usize, radius: f64) -> bool {
    let sector = std::f64::consts::TAU / n as f64;
    // first vertex points up (negative v in image coordinates)
    let phi = (u.atan2(-v)).rem_euclid(sector) - sector / 2.0;
    let r = (u * u + v * v).sqrt();
    r * phi.cos() <= radius * (sector / 2.0).cos()
}

fn in_star(u: f64, v: f64, points: usize, outer: f64, inner: f64) -> bool {
    let verts: Vec<(f64, f64)> = (0..2 * points)
        .map(|k| {
            let a = k as f64 * std::f64::consts::PI / points as f64;
            let rad = if k % 2 == 0 { outer } else { inner };
            (rad * a.sin(), -rad * a.cos())
        })
        .collect();
    point_in_polygon(u, v, &verts)
}

fn point_in_polygon(x: f64, y: f64, verts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = verts.len() - 1;
    for i in 0..verts.len() {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Appearance of one rendered instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlyphStyle {
    pub family: GlyphFamily,
    /// Side of the `[-1, 1]²` design square in pixels.
    pub size: f64,
    pub angle: f64,
    pub color: [f64; 3],
}

impl GlyphStyle {
    /// Radius of the disk that contains the glyph at any rotation.
    pub fn footprint_radius(&self) -> f64 {
        self.size / 2.0 * std::f64::consts::SQRT_2
    }
}

/// Paint a glyph centered at `(cx, cy)` onto a row-major RGB canvas and
/// return the tight box of the painted pixels, or `None` if nothing landed
/// on the canvas.
pub fn render_glyph(
    canvas: &mut [[f64; 3]],
    width: usize,
    height: usize,
    cx: f64,
    cy: f64,
    style: &GlyphStyle,
) -> Option<BBox> {
    let half = style.size / 2.0;
    let reach = style.footprint_radius().ceil() + 1.0;
    let (c, s) = (style.angle.cos(), style.angle.sin());
    let x0 = (cx - reach).floor().max(0.0) as usize;
    let y0 = (cy - reach).floor().max(0.0) as usize;
    let x1 = ((cx + reach).ceil() as usize).min(width);
    let y1 = ((cy + reach).ceil() as usize).min(height);
    let (mut bx0, mut by0, mut bx1, mut by1) = (usize::MAX, usize::MAX, 0, 0);
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            // rotate the pixel into the glyph frame
            let u = (c * dx + s * dy) / half;
            let v = (-s * dx + c * dy) / half;
            if style.family.contains(u, v) {
                canvas[y * width + x] = style.color;
                bx0 = bx0.min(x);
                by0 = by0.min(y);
                bx1 = bx1.max(x + 1);
                by1 = by1.max(y + 1);
            }
        }
    }
    (bx0 != usize::MAX).then(|| BBox::new(bx0 as f64, by0 as f64, bx1 as f64, by1 as f64))
}

/// HSV in `[0, 1]` to RGB in `[0, 1]`.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(f: GlyphFamily, n: usize) -> Vec<bool> {
        let mut out = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let u = (x as f64 + 0.5) / n as f64 * 2.0 - 1.0;
                let v = (y as f64 + 0.5) / n as f64 * 2.0 - 1.0;
                out.push(f.contains(u, v));
            }
        }
        out
    }

    #[test]
    fn families_have_distinct_masks() {
        let masks: Vec<Vec<bool>> = GlyphFamily::ALL.iter().map(|&f| mask(f, 32)).collect();
        for (i, a) in masks.iter().enumerate() {
            let area = a.iter().filter(|b| **b).count();
            assert!(area > 100, "{:?} area {area}", GlyphFamily::ALL[i]);
            for b in &masks[i + 1..] {
                let diff = a.iter().zip(b).filter(|(x, y)| x != y).count();
                assert!(diff > 40);
            }
        }
    }

    #[test]
    fn rendered_box_covers_painted_pixels() {
        let (w, h) = (40, 30);
        let mut canvas = vec![[0.0; 3]; w * h];
        let style = GlyphStyle {
            family: GlyphFamily::Star,
            size: 24.0,
            angle: 0.7,
            color: [1.0, 0.5, 0.0],
        };
        let b = render_glyph(&mut canvas, w, h, 20.0, 14.0, &style).unwrap();
        for y in 0..h {
            for x in 0..w {
                let painted = canvas[y * w + x] != [0.0; 3];
                let inside = b.contains_point(x as f64 + 0.5, y as f64 + 0.5);
                assert!(!painted || inside);
            }
        }
        assert!(b.width() <= style.footprint_radius() * 2.0 + 1.0);
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        assert_eq!(hsv_to_rgb(1.0 / 3.0, 1.0, 1.0), [0.0, 1.0, 0.0]);
        assert_eq!(hsv_to_rgb(0.5, 0.0, 0.4), [0.4, 0.4, 0.4]);
    }

    #[test]
    fn names_are_snake_case() {
        assert_eq!(GlyphFamily::HalfDisk.name(), "half_disk");
    }
}
