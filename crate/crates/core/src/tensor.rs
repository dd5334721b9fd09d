//! Dense row-major `f32` tensors and the sgemm wrapper the layer engine is built on.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {n} elements, got {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Elements per batch entry.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let r = self.row_len();
        &self.data[i * r..(i + 1) * r]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let r = self.row_len();
        &mut self.data[i * r..(i + 1) * r]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Gathers batch rows in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let r = self.row_len();
        let mut data = Vec::with_capacity(idx.len() * r);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor { shape, data }
    }

    /// Concatenates 2-D tensors `[B, d_k]` along the feature axis.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let b = parts.first().map(|t| t.batch()).unwrap_or(0);
        if parts.iter().any(|t| t.shape.len() != 2 || t.batch() != b) {
            return Err(Error::Shape("concat_cols needs [B, d] tensors with equal B".into()));
        }
        let width: usize = parts.iter().map(|t| t.shape[1]).sum();
        let mut data = Vec::with_capacity(b * width);
        for i in 0..b {
            for t in parts {
                data.extend_from_slice(t.row(i));
            }
        }
        Ok(Tensor { shape: vec![b, width], data })
    }

    /// Inverse of [`Tensor::concat_cols`].
    pub fn split_cols(&self, widths: &[usize]) -> Result<Vec<Tensor>> {
        if self.shape.len() != 2 || widths.iter().sum::<usize>() != self.shape[1] {
            return Err(Error::Shape(format!("cannot split {:?} into widths {widths:?}", self.shape)));
        }
        let b = self.batch();
        let mut out: Vec<Tensor> = widths.iter().map(|&w| Tensor::zeros(&[b, w])).collect();
        for i in 0..b {
            let mut off = 0;
            let row = self.row(i);
            for (t, &w) in out.iter_mut().zip(widths) {
                t.row_mut(i).copy_from_slice(&row[off..off + w]);
                off += w;
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(mut self, s: f32) -> Tensor {
        self.data.iter_mut().for_each(|v| *v *= s);
        self
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major matrices, where `op(a)` is `m x k`
/// and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    alpha: f32,
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above; strides describe exactly the m*k, k*n and m*n regions.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
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
