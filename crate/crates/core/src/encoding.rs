//! Fixed 2-D sinusoidal position encodings for flattened feature grids.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use crate::error::{CatError, Result};
use crate::numerics::Tensor;

pub const DEFAULT_TEMPERATURE: f64 = 10_000.0;

/// `(height·width) × d_model` encoding; row `r·width + c` belongs to grid cell `(r, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionEncoding {
    pub height: usize,
    pub width: usize,
    pub d_model: usize,
    pub temperature: f64,
    pub values: Tensor,
}

/// Normalized coordinate in `[0, 2π]`.
fn normalized(p: usize, extent: usize) -> f64 {
    if extent <= 1 {
        0.0
    } else {
        p as f64 / (extent - 1) as f64 * 2.0 * PI
    }
}

/// Build the encoding. The first `d_model/2` channels encode the row, the
/// rest the column; within each half channel `2i` is `sin(p / T^(2i/(d/2)))`
/// and `2i+1` the matching cosine.
pub fn sine_position_encoding(
    height: usize,
    width: usize,
    d_model: usize,
    temperature: f64,
) -> Result<PositionEncoding> {
    if d_model == 0 || d_model % 4 != 0 {
        return Err(CatError::config(format!(
            "position encoding width must be divisible by 4, got {d_model}"
        )));
    }
    if height == 0 || width == 0 {
        return Err(CatError::config("position encoding grid must be non-empty"));
    }
    if !(temperature > 0.0) {
        return Err(CatError::config("temperature must be positive"));
    }
    let half = d_model / 2;
    let freqs: Vec<f64> = (0..half / 2)
        .map(|i| temperature.powf(2.0 * i as f64 / half as f64))
        .collect();
    let mut data = Vec::with_capacity(height * width * d_model);
    for r in 0..height {
        let y = normalized(r, height);
        for c in 0..width {
            let x = normalized(c, width);
            for coord in [y, x] {
                for f in &freqs {
                    let a = coord / f;
                    data.push(a.sin());
                    data.push(a.cos());
                }
            }
        }
    }
    Ok(PositionEncoding {
        height,
        width,
        d_model,
        temperature,
        values: Tensor::new(vec![height * width, d_model], data)?,
    })
}

/// Encodings keyed by `(height, width, d_model)`; safe to share across threads.
#[derive(Debug)]
pub struct EncodingCache {
    temperature: f64,
    entries: Mutex<HashMap<(usize, usize, usize), Arc<PositionEncoding>>>,
}

impl Default for EncodingCache {
    fn default() -> Self {
        Self::new(DEFAULT_TEMPERATURE)
    }
}

impl Clone for EncodingCache {
    fn clone(&self) -> Self {
        Self::new(self.temperature)
    }
}

impl EncodingCache {
    pub fn new(temperature: f64) -> Self {
        EncodingCache {
            temperature,
            entries: Mutex::new(HashMap::new()),
        }
    }

    pub fn get(&self, height: usize, width: usize, d_model: usize) -> Result<Arc<PositionEncoding>> {
        let key = (height, width, d_model);
        let mut map = self.entries.lock().expect("encoding cache poisoned");
        if let Some(e) = map.get(&key) {
            return Ok(Arc::clone(e));
        }
        let enc = Arc::new(sine_position_encoding(height, width, d_model, self.temperature)?);
        map.insert(key, Arc::clone(&enc));
        Ok(enc)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("encoding cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_is_sin_zero_cos_one() {
        let pe = sine_position_encoding(5, 7, 16, DEFAULT_TEMPERATURE).unwrap();
        let row0 = pe.values.row(0);
        for pair in row0.chunks(2) {
            assert_eq!(pair[0], 0.0);
            assert_eq!(pair[1], 1.0);
        }
    }

    #[test]
    fn bounded_at_paper_width() {
        let pe = sine_position_encoding(13, 13, 256, DEFAULT_TEMPERATURE).unwrap();
        assert!(pe.values.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_width_not_divisible_by_four() {
        assert!(matches!(
            sine_position_encoding(4, 4, 18, DEFAULT_TEMPERATURE),
            Err(CatError::Config(_))
        ));
    }

    #[test]
    fn sin_cos_pairs_are_unit() {
        let pe = sine_position_encoding(6, 9, 32, DEFAULT_TEMPERATURE).unwrap();
        for pair in pe.values.data().chunks(2) {
            assert!((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn rows_are_pairwise_distinct() {
        let pe = sine_position_encoding(8, 8, 32, DEFAULT_TEMPERATURE).unwrap();
        let n = 64;
        let mut min = f64::INFINITY;
        for a in 0..n {
            for b in a + 1..n {
                let d: f64 = pe
                    .values
                    .row(a)
                    .iter()
                    .zip(pe.values.row(b))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                min = min.min(d);
            }
        }
        assert!(min > 0.0, "min pairwise distance {min}");
    }

    #[test]
    fn row_index_follows_row_major_grid() {
        let (h, w, d) = (3, 5, 8);
        let pe = sine_position_encoding(h, w, d, DEFAULT_TEMPERATURE).unwrap();
        for r in 0..h {
            for c in 0..w {
                let row = pe.values.row(r * w + c);
                // first row channel is sin(y), first column channel sin(x)
                assert!((row[0] - normalized(r, h).sin()).abs() < 1e-15);
                assert!((row[d / 2] - normalized(c, w).sin()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn cache_reuses_entries() {
        let cache = EncodingCache::default();
        let a = cache.get(4, 4, 16).unwrap();
        let b = cache.get(4, 4, 16).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        cache.get(4, 5, 16).unwrap();
        assert_eq!(cache.len(), 2);
        assert_eq!(*a, sine_position_encoding(4, 4, 16, DEFAULT_TEMPERATURE).unwrap());
    }
}
