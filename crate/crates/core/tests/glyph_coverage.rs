//! Rasterized glyph areas against closed-form shape areas.

use std::f64::consts::PI;

use cat_core::data::glyph::{render_glyph, GlyphStyle};
use cat_core::data::GlyphFamily;

fn polygon(n: f64, r: f64) -> f64 {
    n / 2.0 * r * r * (2.0 * PI / n).sin()
}

fn lens(r1: f64, r2: f64, d: f64) -> f64 {
    let a = r1 * r1 * ((d * d + r1 * r1 - r2 * r2) / (2.0 * d * r1)).acos();
    let b = r2 * r2 * ((d * d + r2 * r2 - r1 * r1) / (2.0 * d * r2)).acos();
    let c = 0.5 * ((-d + r1 + r2) * (d + r1 - r2) * (d - r1 + r2) * (d + r1 + r2)).sqrt();
    a + b - c
}

/// Area in design units (the glyph lives on `[-1, 1]²`).
fn design_area(f: GlyphFamily) -> f64 {
    let segment = |d: f64| d.acos() - d * (1.0 - d * d).sqrt();
    match f {
        GlyphFamily::Disk => PI,
        GlyphFamily::Square => 1.6 * 1.6,
        GlyphFamily::Triangle => polygon(3.0, 1.0),
        GlyphFamily::Diamond => 2.0,
        GlyphFamily::Pentagon => polygon(5.0, 1.0),
        GlyphFamily::Hexagon => polygon(6.0, 0.95),
        GlyphFamily::Star => 5.0 * 0.45 * (PI / 5.0).sin(),
        GlyphFamily::Plus | GlyphFamily::Cross => 2.0 * 0.6 * 1.9 - 0.36,
        GlyphFamily::Ring => PI * 0.7,
        GlyphFamily::Frame => 4.0 * (0.85f64.powi(2) - 0.25),
        GlyphFamily::Crescent => PI - lens(1.0, 0.56f64.sqrt(), 0.45),
        GlyphFamily::Bar => PI * 0.42,
        GlyphFamily::Tee => 1.8 * 0.55 + 0.56 * 1.9 - 0.56 * 0.55,
        GlyphFamily::Ell => 0.55 * 1.9 + 1.7 * 0.55 - 0.55 * 0.55,
        GlyphFamily::HalfDisk => PI - segment(0.2),
    }
}

fn painted(f: GlyphFamily, size: f64, angle: f64) -> usize {
    let n = 320;
    let mut canvas = vec![[0.0; 3]; n * n];
    render_glyph(
        &mut canvas,
        n,
        n,
        160.0,
        160.0,
        &GlyphStyle {
            family: f,
            size,
            angle,
            color: [1.0; 3],
        },
    )
    .unwrap();
    canvas.iter().filter(|p| p[0] == 1.0).count()
}

#[test]
fn pixel_coverage_matches_shape_area() {
    let size = 200.0;
    let scale = (size / 2.0) * (size / 2.0);
    for f in GlyphFamily::ALL {
        for angle in [0.0, 0.37, 1.2] {
            let got = painted(f, size, angle) as f64 / scale;
            let want = design_area(f);
            assert!(
                (got - want).abs() / want < 0.02,
                "{f:?} at {angle}: {got:.4} vs {want:.4}"
            );
        }
    }
}

#[test]
fn tight_box_contains_every_painted_pixel() {
    let n = 64;
    let mut canvas = vec![[0.0; 3]; n * n];
    let style = GlyphStyle {
        family: GlyphFamily::Star,
        size: 30.0,
        angle: 0.8,
        color: [0.5, 1.0, 0.5],
    };
    let b = render_glyph(&mut canvas, n, n, 20.0, 40.0, &style).unwrap();
    let mut seen = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..n {
        for x in 0..n {
            if canvas[y * n + x][1] == 1.0 {
                assert!(b.contains_point(x as f64 + 0.5, y as f64 + 0.5));
                seen = (seen.0.min(x), seen.1.min(y), seen.2.max(x + 1), seen.3.max(y + 1));
            }
        }
    }
    assert_eq!(
        (b.x1, b.y1, b.x2, b.y2),
        (seen.0 as f64, seen.1 as f64, seen.2 as f64, seen.3 as f64)
    );
}

#[test]
fn off_canvas_glyph_paints_nothing() {
    let mut canvas = vec![[0.0; 3]; 16 * 16];
    let style = GlyphStyle {
        family: GlyphFamily::Disk,
        size: 8.0,
        angle: 0.0,
        color: [1.0; 3],
    };
    assert!(render_glyph(&mut canvas, 16, 16, -40.0, -40.0, &style).is_none());
}
