//! Dense row-major `f64` tensors.
//!
//! Most operations in this crate treat a tensor as a matrix whose column count
//! is the last dimension and whose row count is the product of the leading
//! dimensions.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Argument(format!(
                "tensor shape {shape:?} must be non-empty with all dimensions >= 1"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; n]).expect("valid zero shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n]).expect("valid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a `rows x cols` matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Argument("ragged rows".into()));
        }
        Self::new(
            vec![rows.len(), cols],
            rows.iter().flatten().copied().collect(),
        )
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    /// Product of all but the last dimension.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// `c[m x n] = a[m x k] * b[k x n]` on contiguous row-major buffers,
/// optionally transposing either operand.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices have exactly the lengths implied by (m, k, n) and the
    // strides above address only elements inside them.
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

/// Affine map `x * weight + bias` for `x: [B x I]`, `weight: [I x O]`, `bias: [O]`.
pub fn linear_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if weight.shape().len() != 2 || x.cols() != weight.shape()[0] {
        return Err(Error::dim("linear_forward", x.shape(), weight.shape()));
    }
    let out = weight.shape()[1];
    if bias.len() != out {
        return Err(Error::dim("linear_forward", weight.shape(), bias.shape()));
    }
    let rows = x.rows();
    let mut data = vec![0.0; rows * out];
    gemm(rows, x.cols(), out, x.data(), false, weight.data(), false, &mut data, false);
    for r in data.chunks_mut(out) {
        for (v, b) in r.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out;
    Tensor::new(shape, data)
}

/// Mean of squared elementwise differences.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::dim("mse_loss", pred.shape(), target.shape()));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / pred.len() as f64)
}
