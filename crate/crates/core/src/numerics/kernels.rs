//! Raw slice kernels shared by [`Tensor`](super::Tensor) and the graph ops.

/// `c = a·b + beta·c` where `a` is `m×k` and `b` is `k×n` after optional
/// transposition of their row-major storage.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and the strides describe
    // in-bounds row-major (or transposed) views of those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

/// Decompose `shape` around `axis` into `(outer, axis_len, inner)`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// In-place max-subtracted softmax over the middle index of an
/// `outer × len × inner` layout.
pub fn softmax_axis(x: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for l in 0..len {
                max = max.max(x[base + l * inner]);
            }
            let mut total = 0.0;
            for l in 0..len {
                let e = (x[base + l * inner] - max).exp();
                x[base + l * inner] = e;
                total += e;
            }
            for l in 0..len {
                x[base + l * inner] /= total;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Unfold `C×H×W` input into a `(C·k·k) × (Ho·Wo)` column matrix.
pub fn im2col(x: &[f64], geo: &ConvGeometry) -> Vec<f64> {
    let (ho, wo) = (geo.out_height(), geo.out_width());
    let cols_n = ho * wo;
    let mut cols = vec![0.0; geo.patch_len() * cols_n];
    let k = geo.kernel;
    for c in 0..geo.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for oy in 0..ho {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    if iy < 0 || iy >= geo.height as isize {
                        continue;
                    }
                    let src_row = (c * geo.height + iy as usize) * geo.width;
                    for ox in 0..wo {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        if ix >= 0 && ix < geo.width as isize {
                            dst[oy * wo + ox] = x[src_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into `C×H×W`.
pub fn col2im(cols: &[f64], geo: &ConvGeometry, dx: &mut [f64]) {
    let (ho, wo) = (geo.out_height(), geo.out_width());
    let cols_n = ho * wo;
    let k = geo.kernel;
    for c in 0..geo.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for oy in 0..ho {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    if iy < 0 || iy >= geo.height as isize {
                        continue;
                    }
                    let dst_row = (c * geo.height + iy as usize) * geo.width;
                    for ox in 0..wo {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        if ix >= 0 && ix < geo.width as isize {
                            dx[dst_row + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposed_operands() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        // aᵀ·b
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        // a·bᵀ
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let geo = ConvGeometry {
            channels: 2,
            height: 5,
            width: 4,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..40).map(|v| (v as f64 * 0.37).sin()).collect();
        let cols = im2col(&x, &geo);
        let y: Vec<f64> = (0..cols.len()).map(|v| (v as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &geo, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
    }
}
