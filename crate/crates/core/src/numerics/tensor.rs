use rand::Rng;

use crate::error::{CatError, Result};
use crate::numerics::kernels;

/// Dense row-major array of `f64` values.
///
/// `grad` is only populated on parameter tensors after a backward pass has
/// been folded back into a [`ParamStore`](crate::numerics::ParamStore).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(CatError::contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CatError::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map(|r| r.len()).unwrap_or(0);
        if n == 0 || d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(CatError::contract("from_rows needs a non-empty rectangular array"));
        }
        Tensor::new(vec![n, d], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform_fan_in<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Self::uniform(shape, -bound, bound, rng)
    }

    pub fn uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} of size {dim}");
            off = off * dim + ix;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = *self.shape.last().unwrap();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(CatError::dim("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, &self.data, false, &other.data, false, &mut out, 0.0);
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(CatError::contract("transpose2d needs a rank-2 tensor"));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        Tensor::new(vec![n, m], kernels::transpose(&self.data, m, n))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(CatError::contract(format!(
                "softmax axis {axis} out of range for rank {}",
                self.rank()
            )));
        }
        let (outer, len, inner) = kernels::split_axis(&self.shape, axis);
        let mut out = self.data.clone();
        kernels::softmax_axis(&mut out, outer, len, inner);
        Tensor::new(self.shape.clone(), out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_and_permutation() {
        let b = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(Tensor::eye(3).matmul(&b).unwrap(), b);

        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let p = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let c = a.matmul(&p).unwrap();
        assert_eq!(c.data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_overflow_safe() {
        let t = Tensor::zeros(&[3]);
        let s = t.softmax(0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap();
        let s = big.softmax(0).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert_eq!(s.data()[1], 0.0);
        assert!(s.is_finite());
    }

    #[test]
    fn softmax_middle_axis() {
        let t = Tensor::new(vec![2, 3, 2], (0..12).map(|v| v as f64 * 0.3).collect()).unwrap();
        let s = t.softmax(1).unwrap();
        for a in 0..2 {
            for c in 0..2 {
                let total: f64 = (0..3).map(|b| s.get(&[a, b, c])).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}
