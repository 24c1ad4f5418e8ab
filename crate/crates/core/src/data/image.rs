//! 8-bit RGB images and binary PPM (P6) IO.

use std::io::{BufRead, Write};

use crate::error::{CatError, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved `r, g, b` bytes in row-major order.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// `3×H×W` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for (p, px) in self.data.chunks(3).enumerate() {
            for c in 0..3 {
                out[c * hw + p] = px[c] as f64 / 255.0;
            }
        }
        Tensor::new(vec![3, self.height, self.width], out).expect("image tensor shape")
    }

    pub fn from_rgb_f64(width: usize, height: usize, rgb: &[[f64; 3]]) -> Self {
        let mut img = RgbImage::new(width, height);
        for (dst, px) in img.data.chunks_mut(3).zip(rgb) {
            for c in 0..3 {
                dst[c] = (px[c].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        img
    }
}

pub fn write_ppm<W: Write>(mut w: W, img: &RgbImage) -> Result<()> {
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.data)?;
    Ok(())
}

fn header_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = Vec::new();
    loop {
        let mut byte = [0u8];
        if r.read(&mut byte)? == 0 {
            break;
        }
        match byte[0] {
            b'#' if tok.is_empty() => {
                let mut rest = Vec::new();
                r.read_until(b'\n', &mut rest)?;
            }
            b if b.is_ascii_whitespace() => {
                if !tok.is_empty() {
                    break;
                }
            }
            b => tok.push(b),
        }
    }
    if tok.is_empty() {
        return Err(CatError::data("truncated PPM header"));
    }
    String::from_utf8(tok).map_err(|_| CatError::data("non-ASCII PPM header"))
}

pub fn read_ppm<R: BufRead>(mut r: R) -> Result<RgbImage> {
    if header_token(&mut r)? != "P6" {
        return Err(CatError::data("not a binary PPM (P6) file"));
    }
    let mut num = |what: &str| -> Result<usize> {
        header_token(&mut r)?
            .parse()
            .map_err(|_| CatError::data(format!("bad PPM {what}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(CatError::data(format!("unsupported PPM maxval {maxval}")));
    }
    let mut data = vec![0u8; width * height * 3];
    r.read_exact(&mut data)
        .map_err(|_| CatError::data("truncated PPM pixel data"))?;
    Ok(RgbImage { width, height, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_exact() {
        let mut img = RgbImage::new(5, 3);
        for (i, b) in img.data.iter_mut().enumerate() {
            *b = (i * 17 % 256) as u8;
        }
        let mut buf = Vec::new();
        write_ppm(&mut buf, &img).unwrap();
        assert!(buf.starts_with(b"P6\n5 3\n255\n"));
        assert_eq!(read_ppm(&buf[..]).unwrap(), img);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut buf = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        buf.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = read_ppm(&buf[..]).unwrap();
        assert_eq!(img.pixel(1, 0), [4, 5, 6]);
    }

    #[test]
    fn truncated_data_rejected() {
        let buf = b"P6\n2 2\n255\n\x01\x02".to_vec();
        assert!(matches!(read_ppm(&buf[..]), Err(CatError::Data(_))));
        assert!(read_ppm(&b"P5\n1 1\n255\n\x00"[..]).is_err());
    }

    #[test]
    fn tensor_layout_is_channel_major() {
        let mut img = RgbImage::new(2, 1);
        img.set_pixel(1, 0, [255, 0, 51]);
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.get(&[0, 0, 1]), 1.0);
        assert!((t.get(&[2, 0, 1]) - 0.2).abs() < 1e-12);
    }
}
