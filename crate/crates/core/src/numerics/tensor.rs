//! Dense row-major tensors and the raw kernels the tape is built on.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Work (multiply-adds) above which matmul kernels split rows across threads.
/// Each output element is always accumulated in the same order, so results do
/// not depend on the thread count.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) || expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Self { shape, data })
    }

    /// Constructor for kernel outputs whose shape is correct by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Samples i.i.d. `normal(0, std)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        if std == 0.0 {
            return Self::zeros(shape);
        }
        let normal = Normal::new(0.0, std).expect("std is finite and positive");
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Self::from_parts(shape.to_vec(), data)
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

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensors have rank >= 1")
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        self.len() / self.cols()
    }

    pub fn item(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds on axis {i}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix product over the last axis of `self` and a 2-D `other`.
    /// Leading axes of `self` are treated as extra rows.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if other.shape.len() != 2 || self.cols() != other.shape[0] {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (rows, k, n) = (self.rows(), self.cols(), other.shape[1]);
        let data = gemm(&self.data, rows, k, &other.data, n);
        let mut shape = self.shape.clone();
        *shape.last_mut().expect("rank >= 1") = n;
        Ok(Self::from_parts(shape, data))
    }

    /// Swaps the last two axes. Rank-1 tensors are treated as a single row.
    pub fn transpose(&self) -> Self {
        let (batch, r, c) = self.as_batched();
        let mut out = vec![0.0; self.len()];
        for b in 0..batch {
            let src = &self.data[b * r * c..(b + 1) * r * c];
            let dst = &mut out[b * r * c..(b + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut shape = self.shape.clone();
        match shape.len() {
            1 => shape = vec![c, 1],
            n => shape.swap(n - 2, n - 1),
        }
        Self::from_parts(shape, out)
    }

    /// Views the tensor as `batch` stacked matrices of the last two axes.
    pub(crate) fn as_batched(&self) -> (usize, usize, usize) {
        match self.shape.len() {
            1 => (1, 1, self.shape[0]),
            n => {
                let r = self.shape[n - 2];
                let c = self.shape[n - 1];
                (self.len() / (r * c), r, c)
            }
        }
    }
}

/// `a[rows×k] · b[k×n]`, row-major. Every output element accumulates its
/// `k` products in index order, so results do not depend on threading or on
/// which kernel variant runs.
pub(crate) fn gemm(a: &[f64], rows: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * n];
    let avx2 = has_avx2();
    let block_kernel = |(blk, out_blk): (usize, &mut [f64])| {
        let i0 = blk * ROW_BLOCK;
        let a_blk = &a[i0 * k..i0 * k + (out_blk.len() / n) * k];
        #[cfg(target_arch = "x86_64")]
        if avx2 {
            // SAFETY: the CPU supports AVX2, checked at runtime.
            unsafe { gemm_block_avx2(a_blk, k, b, n, out_blk) };
            return;
        }
        let _ = avx2;
        gemm_block(a_blk, k, b, n, out_blk);
    };
    if rows * k * n >= PAR_THRESHOLD && rows > ROW_BLOCK {
        out.par_chunks_mut(ROW_BLOCK * n).enumerate().for_each(block_kernel);
    } else {
        out.chunks_mut(ROW_BLOCK * n).enumerate().for_each(block_kernel);
    }
    out
}

const ROW_BLOCK: usize = 4;

fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_block_avx2(a: &[f64], k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    gemm_block(a, k, b, n, out)
}

/// Up to [`ROW_BLOCK`] output rows; a full block shares each pass over a row
/// of `b` between four accumulators.
#[inline(always)]
fn gemm_block(a: &[f64], k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    if out.len() == ROW_BLOCK * n {
        let (o0, rest) = out.split_at_mut(n);
        let (o1, rest) = rest.split_at_mut(n);
        let (o2, o3) = rest.split_at_mut(n);
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let (x0, x1, x2, x3) = (a[p], a[k + p], a[2 * k + p], a[3 * k + p]);
            for ((((bv, y0), y1), y2), y3) in b_row
                .iter()
                .zip(o0.iter_mut())
                .zip(o1.iter_mut())
                .zip(o2.iter_mut())
                .zip(o3.iter_mut())
            {
                *y0 += x0 * bv;
                *y1 += x1 * bv;
                *y2 += x2 * bv;
                *y3 += x3 * bv;
            }
        }
    } else {
        for (out_row, a_row) in out.chunks_mut(n).zip(a.chunks(k)) {
            for (p, &ap) in a_row.iter().enumerate() {
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += ap * bv;
                }
            }
        }
    }
}

/// Batched `a[B×m×k] · b[B×k×n]`.
pub(crate) fn batched_gemm(a: &[f64], b: &[f64], batch: usize, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    let kernel = |(bi, chunk): (usize, &mut [f64])| {
        let prod = gemm(&a[bi * m * k..(bi + 1) * m * k], m, k, &b[bi * k * n..(bi + 1) * k * n], n);
        chunk.copy_from_slice(&prod);
    };
    if batch * m * k * n >= PAR_THRESHOLD && batch > 1 {
        out.par_chunks_mut(m * n).enumerate().for_each(kernel);
    } else {
        out.chunks_mut(m * n).enumerate().for_each(kernel);
    }
    out
}

/// Transposes a row-major `rows×cols` matrix.
pub(crate) fn transpose2(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}
