//! Dense row-major `f32` arrays and the handful of kernels the rest of the
//! crate needs.
//!
//! Token tensors use axis order `(batch, token, channel)`. Reductions inside
//! [`matmul`] and [`softmax_rows`] accumulate in `f64`.

mod io;

pub use io::{read_sections, read_tensor, write_sections, write_tensor, DUMP_VERSION};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!("shape {:?} holds {} values, got {}", shape, n, data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Gaussian entries with standard deviation `std`.
    pub fn randn(shape: &[usize], std: f32, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: rng.normal_vec(n, std) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when every leading axis is flattened.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.data.len().checked_div(self.cols()).unwrap_or(0)
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim(format!("cannot reshape {:?} to {:?}", self.shape, shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::dim("transpose needs a rank-2 tensor"));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f32) -> Self {
        self.map(|x| x * s)
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f32> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).fold(0.0f32, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }
}

/// Matrix product. `a` may have any rank ≥ 2; its leading axes are treated
/// as rows, so a `(batch, token, k)` tensor times `(k, m)` gives
/// `(batch, token, m)`.
pub fn matmul(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    if a.rank() < 2 || b.rank() != 2 {
        return Err(Error::dim(format!("matmul of {:?} and {:?}", a.shape, b.shape)));
    }
    let k = a.cols();
    if b.shape[0] != k {
        return Err(Error::dim(format!("inner dimensions disagree: {:?} x {:?}", a.shape, b.shape)));
    }
    let m = b.shape[1];
    let rows = a.rows();
    let mut out = vec![0.0f32; rows * m];
    matmul_into(&a.data, rows, b, &mut out);
    let mut shape = a.shape.clone();
    *shape.last_mut().unwrap() = m;
    DenseTensor::new(shape, out)
}

/// Row-major `(rows × k) · (k × m)` into `out`, where `k × m` is the shape of
/// `b`. Panics on length mismatch; callers validate shapes.
pub fn matmul_into(a: &[f32], rows: usize, b: &DenseTensor, out: &mut [f32]) {
    let (k, m) = (b.shape[0], b.shape[1]);
    assert_eq!(a.len(), rows * k);
    assert_eq!(out.len(), rows * m);
    let mut acc = vec![0.0f64; m];
    for i in 0..rows {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            let aik = aik as f64;
            let brow = &b.data[kk * m..(kk + 1) * m];
            for (s, &bkj) in acc.iter_mut().zip(brow) {
                *s += aik * bkj as f64;
            }
        }
        for (o, s) in out[i * m..(i + 1) * m].iter_mut().zip(&acc) {
            *o = *s as f32;
        }
    }
}

/// Softmax over the last axis, with an optional additive bias per column.
pub fn softmax_rows(logits: &DenseTensor, bias: Option<&[f32]>) -> Result<DenseTensor> {
    let cols = logits.cols();
    if cols == 0 || logits.rank() == 0 {
        return Err(Error::domain("softmax over an empty row"));
    }
    if let Some(b) = bias {
        if b.len() != cols {
            return Err(Error::dim(format!("bias length {} for {} columns", b.len(), cols)));
        }
    }
    let mut out = DenseTensor::zeros(&logits.shape);
    let mut scratch = vec![0.0f64; cols];
    for i in 0..logits.rows() {
        softmax_row_into(logits.row(i), bias, &mut scratch, out.row_mut(i));
    }
    Ok(out)
}

/// Single-row softmax kernel shared by [`softmax_rows`] and the attention
/// blocks. `scratch` must be at least as long as `row`.
pub fn softmax_row_into(row: &[f32], bias: Option<&[f32]>, scratch: &mut [f64], out: &mut [f32]) {
    let n = row.len();
    let scratch = &mut scratch[..n];
    match bias {
        Some(b) => {
            for ((s, &x), &bj) in scratch.iter_mut().zip(row).zip(b) {
                *s = x as f64 + bj as f64;
            }
        }
        None => {
            for (s, &x) in scratch.iter_mut().zip(row) {
                *s = x as f64;
            }
        }
    }
    // four partial reductions keep the loops free of a single dependency chain
    let mut maxes = [f64::NEG_INFINITY; 4];
    let mut chunks = scratch.chunks_exact(4);
    for c in &mut chunks {
        for (m, &x) in maxes.iter_mut().zip(c) {
            *m = m.max(x);
        }
    }
    let max = chunks.remainder().iter().chain(&maxes).copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sums = [0.0f64; 4];
    let mut chunks = scratch.chunks_exact_mut(4);
    for c in &mut chunks {
        for (acc, s) in sums.iter_mut().zip(c) {
            *s = (*s - max).exp();
            *acc += *s;
        }
    }
    for s in chunks.into_remainder() {
        *s = (*s - max).exp();
        sums[0] += *s;
    }
    let inv = 1.0 / ((sums[0] + sums[1]) + (sums[2] + sums[3]));
    for (o, s) in out.iter_mut().zip(scratch.iter()) {
        *o = (s * inv) as f32;
    }
}
